fn main() {
    std::process::exit(lpalign::cli::run(std::env::args_os()));
}
