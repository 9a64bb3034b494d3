//! Command-line front end: `align`, `eval`, `task` and `neighbors`.
//!
//! Experiments are described by a TOML file. Relative paths inside it are
//! resolved against the file's directory. Exit codes: 0 on success, 2 for
//! configuration errors, 3 for runtime failures such as divergence.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{train_align, AlignConfig, EpochRecord, LinearMap};
use crate::embeddings::{load_embeddings, load_lexicon, normalize, EmbeddingFormat, Normalization};
use crate::error::Error;
use crate::eval::{precision_with, reports_to_csv, MetricsReport, RetrievalConfig, RetrievalMethod, Retriever};
use crate::lle::LleWeights;
use crate::neighbors::{build_index, knn, NeighborGraph};
use crate::tasker::{self, load_pair_dataset, train_task, TaskConfig, TaskKind, Variant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "lpalign", version, about = "Locality preserving alignment of embedding spaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a linear map between two embedding spaces and score it.
    Align(RunArgs),
    /// Score a saved map on a test lexicon.
    Eval(EvalArgs),
    /// Run a pair-task sweep over subset sizes and loss variants.
    Task(RunArgs),
    /// Print the nearest neighbors of one embedding.
    Neighbors(NeighborArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Validate the configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = ["nn", "csls"])]
    pub method: Option<String>,
    #[arg(long)]
    pub topk: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `align`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    #[arg(long, default_value = "word2vec")]
    pub format: String,
    /// Defaults to the scheme recorded next to the checkpoint.
    #[arg(long)]
    pub preprocess: Option<String>,
    #[arg(long, value_parser = ["nn", "csls"], default_value = "csls")]
    pub method: String,
    #[arg(long, default_value_t = 1)]
    pub topk: usize,
    #[arg(long, default_value_t = 10)]
    pub csls_k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NeighborArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value = "word2vec")]
    pub format: String,
    #[arg(long, conflicts_with = "id", required_unless_present = "id")]
    pub token: Option<String>,
    #[arg(long)]
    pub id: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Align,
    TaskClassify,
    TaskRegress,
}

/// Input files. Alignment uses the source/target/lexicon entries, tasks
/// use `embeddings`, `train` and `test`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: EmbeddingFormat,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub train_lexicon: Option<PathBuf>,
    pub val_lexicon: Option<PathBuf>,
    pub test_lexicon: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub variants: Vec<String>,
    pub folds: usize,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Align => "align",
            Mode::TaskClassify => "task-classify",
            Mode::TaskRegress => "task-regress",
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sizes: vec![40, 200],
            variants: vec!["baseline".into(), "mse".into(), "mse+lpl".into()],
            folds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Overrides every optimizer seed when set.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Cutoff for precision@k.
    pub topk: usize,
    pub data: DataConfig,
    pub align: AlignConfig,
    pub retrieval: RetrievalConfig,
    pub task: TaskConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Align,
            seed: None,
            out: None,
            topk: 1,
            data: DataConfig::default(),
            align: AlignConfig::default(),
            retrieval: RetrievalConfig::default(),
            task: TaskConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Parses a config. `[task] delta_preset` picks a preset delta table that
/// `[task.delta]` entries then override.
pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(toml::Value::Table(task)) = table.get_mut("task") {
        let base = match task.remove("delta_preset") {
            Some(toml::Value::String(name)) => tasker::delta_preset(&name)?,
            Some(other) => return Err(CliError::Config(format!("task.delta_preset must be a string, got {other}"))),
            None => tasker::snli_deltas(),
        };
        let mut merged = toml::Table::new();
        for (k, v) in base {
            merged.insert(k, toml::Value::Float(v));
        }
        match task.remove("delta") {
            Some(toml::Value::Table(explicit)) => merged.extend(explicit),
            Some(other) => return Err(CliError::Config(format!("task.delta must be a table, got {other}"))),
            None => {}
        }
        task.insert("delta".into(), toml::Value::Table(merged));
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}

/// Hex SHA-256 of the resolved config in JSON form.
pub fn fingerprint(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex(&Sha256::digest(json.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// A config with command-line overrides applied, plus the directory its
/// relative paths refer to.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub cfg: ExperimentConfig,
    pub base: PathBuf,
    pub out: PathBuf,
    pub fingerprint: String,
}

impl Resolved {
    fn path(&self, field: &str, value: &Option<PathBuf>) -> CliResult<PathBuf> {
        let p = value.as_ref().ok_or_else(|| CliError::Config(format!("{field}: required but missing")))?;
        let full = self.base.join(p);
        if !full.is_file() {
            return Err(CliError::Config(format!("{field}: no such file {}", full.display())));
        }
        Ok(full)
    }

    fn optional_path(&self, field: &str, value: &Option<PathBuf>) -> CliResult<Option<PathBuf>> {
        match value {
            Some(_) => self.path(field, value).map(Some),
            None => Ok(None),
        }
    }
}

pub fn resolve(args: &RunArgs, command: &str) -> CliResult<Resolved> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = args.seed.or(cfg.seed) {
        cfg.seed = Some(seed);
        cfg.align.optimizer.seed = seed;
        cfg.align.weight_optimizer.seed = seed;
        cfg.task.optimizer.seed = seed;
    }
    if let Some(m) = &args.method {
        cfg.retrieval.method = m.parse::<RetrievalMethod>()?;
    }
    if let Some(k) = args.topk {
        cfg.topk = k;
    }
    match (command, cfg.mode) {
        ("align", Mode::Align) => {}
        ("task", Mode::TaskClassify) => cfg.task.kind = TaskKind::Classify,
        ("task", Mode::TaskRegress) => cfg.task.kind = TaskKind::Regress,
        (c, m) => return Err(CliError::Config(format!("mode {} cannot be run with `{c}`", m.name()))),
    }
    let base = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let out = match (&args.out, &cfg.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => base.join(o),
        (None, None) => base.join("out"),
    };
    let fingerprint = fingerprint(&cfg);
    let resolved = Resolved {
        cfg,
        base,
        out,
        fingerprint,
    };
    validate(&resolved)?;
    Ok(resolved)
}

fn validate(r: &Resolved) -> CliResult<()> {
    let c = &r.cfg;
    if c.topk == 0 {
        return Err(CliError::Config("topk must be >= 1".into()));
    }
    match c.mode {
        Mode::Align => {
            c.align.validate()?;
            c.retrieval.validate()?;
            let d = &c.data;
            r.path("data.source", &d.source)?;
            r.path("data.target", &d.target)?;
            r.path("data.train_lexicon", &d.train_lexicon)?;
            r.path("data.test_lexicon", &d.test_lexicon)?;
            r.optional_path("data.val_lexicon", &d.val_lexicon)?;
        }
        Mode::TaskClassify | Mode::TaskRegress => {
            c.task.validate()?;
            let d = &c.data;
            r.path("data.embeddings", &d.embeddings)?;
            r.path("data.train", &d.train)?;
            r.path("data.test", &d.test)?;
            if c.sweep.sizes.is_empty() || c.sweep.variants.is_empty() {
                return Err(CliError::Config("sweep.sizes and sweep.variants must be non-empty".into()));
            }
            if c.sweep.folds == 0 {
                return Err(CliError::Config("sweep.folds must be >= 1".into()));
            }
            for v in &c.sweep.variants {
                v.parse::<Variant>()?;
            }
        }
    }
    Ok(())
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::io(dir, e)))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// Metadata written next to a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub dim: usize,
    pub preprocess: Normalization,
    pub best_epoch: usize,
    pub final_losses: EpochRecord,
    pub fingerprint: String,
    pub config: ExperimentConfig,
}

/// Checkpoint text with the fingerprint as a comment after the header.
fn checkpoint_with_fingerprint(map: &LinearMap, fp: &str) -> String {
    let text = map.to_checkpoint();
    let (header, rows) = text.split_once('\n').expect("header line");
    format!("{header}\n# fingerprint {fp}\n{rows}")
}

/// `point  neighbor  weight` rows, neighbors in graph order.
fn weights_tsv(graph: &NeighborGraph, weights: &LleWeights, fingerprint: &str) -> String {
    let mut out = format!("# fingerprint {fingerprint}\n");
    for (i, row) in weights.w.outer_iter().enumerate() {
        for (j, w) in graph.neighbors(i).iter().zip(row) {
            let _ = writeln!(out, "{i}\t{j}\t{w}");
        }
    }
    out
}

pub fn cmd_align(args: &RunArgs) -> CliResult<()> {
    let r = resolve(args, "align")?;
    if args.dry_run {
        println!("config ok, fingerprint {}", r.fingerprint);
        return Ok(());
    }
    let c = &r.cfg;
    let d = &c.data;
    let src = load_embeddings(r.path("data.source", &d.source)?, d.format)?;
    let tgt = load_embeddings(r.path("data.target", &d.target)?, d.format)?;
    let lexicon = |field: &str, p: &Option<PathBuf>| -> CliResult<_> {
        Ok(load_lexicon(r.path(field, p)?, src.vocab(), tgt.vocab())?)
    };
    let train = lexicon("data.train_lexicon", &d.train_lexicon)?;
    let test = lexicon("data.test_lexicon", &d.test_lexicon)?;
    let val = match &d.val_lexicon {
        Some(_) => lexicon("data.val_lexicon", &d.val_lexicon)?,
        None => Default::default(),
    };

    let trained = train_align(&c.align, &src, &tgt, &train, &val)?;
    let retriever = Retriever::new(&trained.map, &trained.source, &trained.target, &c.retrieval)?;
    let p = precision_with(&retriever, &test, c.topk)?;
    let mut report = MetricsReport::from_runs(&[p], &[c.align.optimizer.seed])?.labeled(
        "align",
        c.retrieval.method.name(),
        &format!("precision@{}", c.topk),
    );
    report.train_size = Some(train.len());
    report.k = Some(c.align.k);
    report.fingerprint = Some(r.fingerprint.clone());

    create_dir(&r.out)?;
    let final_losses = trained
        .log
        .iter()
        .find(|rec| rec.epoch == trained.best_epoch)
        .cloned()
        .expect("best epoch is logged");
    let sidecar = ModelSidecar {
        dim: trained.map.dim(),
        preprocess: c.align.preprocess,
        best_epoch: trained.best_epoch,
        final_losses,
        fingerprint: r.fingerprint.clone(),
        config: c.clone(),
    };
    write(&r.out, "model.txt", &checkpoint_with_fingerprint(&trained.map, &r.fingerprint))?;
    write(&r.out, "model.json", &to_json(&sidecar))?;
    write(
        &r.out,
        "lle_weights.tsv",
        &weights_tsv(&trained.graph, &trained.weights, &r.fingerprint),
    )?;
    let mut log = String::new();
    for rec in &trained.log {
        let mut v = serde_json::to_value(rec).map_err(Error::from)?;
        v["fingerprint"] = serde_json::Value::String(r.fingerprint.clone());
        log.push_str(&v.to_string());
        log.push('\n');
    }
    write(&r.out, "train_log.jsonl", &log)?;
    write(&r.out, "metrics.json", &to_json(&report))?;
    write(&r.out, "metrics.csv", &reports_to_csv(std::slice::from_ref(&report)))?;
    println!("{} ({}): {p}", report.metric, report.method);
    println!("artifacts written to {}", r.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    model: &'a Path,
    lexicon: &'a Path,
    preprocess: Normalization,
    retrieval: &'a RetrievalConfig,
    topk: usize,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let format: EmbeddingFormat = args.format.parse()?;
    let retrieval = RetrievalConfig {
        method: args.method.parse()?,
        csls_k: args.csls_k,
    };
    retrieval.validate()?;
    if args.topk == 0 {
        return Err(CliError::Config("topk must be >= 1".into()));
    }
    let sidecar_path = args.model.with_extension("json");
    let preprocess = match &args.preprocess {
        Some(p) => p.parse()?,
        None if sidecar_path.is_file() => {
            let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
            serde_json::from_str::<ModelSidecar>(&text).map_err(Error::from)?.preprocess
        }
        None => Normalization::default(),
    };
    let text = fs::read_to_string(&args.model).map_err(|e| Error::io(&args.model, e))?;
    let map = LinearMap::from_checkpoint(&text)?;
    let src = normalize(&load_embeddings(&args.source, format)?, preprocess)?;
    let tgt = normalize(&load_embeddings(&args.target, format)?, preprocess)?;
    let lex = load_lexicon(&args.lexicon, src.vocab(), tgt.vocab())?;
    let retriever = Retriever::new(&map, &src, &tgt, &retrieval)?;
    let p = precision_with(&retriever, &lex, args.topk)?;

    let settings = EvalSettings {
        model: &args.model,
        lexicon: &args.lexicon,
        preprocess,
        retrieval: &retrieval,
        topk: args.topk,
    };
    let fp = hex(&Sha256::digest(serde_json::to_string(&settings).map_err(Error::from)?.as_bytes()));
    let mut report = MetricsReport::from_runs(&[p], &[0])?.labeled(
        "eval",
        retrieval.method.name(),
        &format!("precision@{}", args.topk),
    );
    report.fingerprint = Some(fp);
    print!("{}", to_json(&report));
    if let Some(out) = &args.out {
        create_dir(out)?;
        write(out, "metrics.json", &to_json(&report))?;
        write(out, "metrics.csv", &reports_to_csv(std::slice::from_ref(&report)))?;
    }
    Ok(())
}

pub fn cmd_task(args: &RunArgs) -> CliResult<()> {
    let r = resolve(args, "task")?;
    if args.dry_run {
        println!("config ok, fingerprint {}", r.fingerprint);
        return Ok(());
    }
    let c = &r.cfg;
    let d = &c.data;
    let emb = load_embeddings(r.path("data.embeddings", &d.embeddings)?, d.format)?;
    let train = load_pair_dataset(r.path("data.train", &d.train)?, &emb, &c.task)?;
    let test = load_pair_dataset(r.path("data.test", &d.test)?, &emb, &c.task)?;
    let variants: Vec<Variant> = c.sweep.variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?;
    let cells: Vec<(usize, Variant)> = c
        .sweep
        .sizes
        .iter()
        .flat_map(|&size| variants.iter().map(move |&v| (size, v)))
        .collect();
    let reports = cells
        .par_iter()
        .map(|&(size, variant)| {
            let mut report = train_task(&c.task, &train, &test, size, c.sweep.folds, variant)?.report;
            report.fingerprint = Some(r.fingerprint.clone());
            Ok(report)
        })
        .collect::<Result<Vec<_>, Error>>()?;

    create_dir(&r.out)?;
    write(&r.out, "metrics.json", &to_json(&reports))?;
    write(&r.out, "metrics.csv", &reports_to_csv(&reports))?;
    for rep in &reports {
        println!(
            "size {:>5}  {:<8}  {} {:.4} ± {:.4}",
            rep.train_size.unwrap_or_default(),
            rep.method,
            rep.metric,
            rep.mean,
            rep.std
        );
    }
    println!("artifacts written to {}", r.out.display());
    Ok(())
}

/// `rank<TAB>id<TAB>token<TAB>distance` lines, nearest first.
pub fn neighbor_lines(args: &NeighborArgs) -> CliResult<Vec<String>> {
    let format: EmbeddingFormat = args.format.parse()?;
    let m = load_embeddings(&args.embeddings, format)?;
    let id = match (&args.token, args.id) {
        (Some(t), _) => m
            .vocab()
            .lookup(t)
            .ok_or_else(|| CliError::Config(format!("token {t:?} is not in {}", args.embeddings.display())))?,
        (None, Some(i)) if i < m.len() => i,
        (None, Some(i)) => return Err(CliError::Config(format!("id {i} out of range for {} rows", m.len()))),
        (None, None) => return Err(CliError::Config("pass --token or --id".into())),
    };
    let found = knn(&build_index(&m)?, id, args.k, true)?;
    Ok(found
        .iter()
        .enumerate()
        .map(|(rank, &(j, dist))| format!("{}\t{j}\t{}\t{dist}", rank + 1, m.vocab().token(j)))
        .collect())
}

pub fn cmd_neighbors(args: &NeighborArgs) -> CliResult<()> {
    for line in neighbor_lines(args)? {
        println!("{line}");
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Align(a) => cmd_align(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Task(a) => cmd_task(a),
        Command::Neighbors(a) => cmd_neighbors(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_file() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.align.optimizer.learning_rate, 1e-3);
        assert_eq!(c.task.optimizer.learning_rate, 1e-4);
        assert_eq!(c.align.beta, 0.7);
        assert_eq!(c.task.gamma, 1.0);
        assert_eq!(c.retrieval.csls_k, 10);
    }

    #[test]
    fn sections_and_presets() {
        let c = parse_config(
            r#"
mode = "task-classify"
[align]
beta = 0.0
[align.optimizer]
epochs = 5
[task]
delta_preset = "mnli"
gamma = 0.5
[task.delta]
neutral = 2.0
[sweep]
sizes = [10]
"#,
        )
        .unwrap();
        assert_eq!(c.mode, Mode::TaskClassify);
        assert_eq!(c.align.beta, 0.0);
        assert_eq!(c.align.optimizer.epochs, 5);
        assert_eq!(c.task.delta["entailment"], 250.0);
        assert_eq!(c.task.delta["neutral"], 2.0);
        assert_eq!(c.task.delta["contradiction"], -10.0);
        assert_eq!(c.sweep.sizes, vec![10]);
    }

    #[test]
    fn rejects_unknown_keys_and_presets() {
        assert!(matches!(parse_config("[align]\nbeat = 1.0\n"), Err(CliError::Config(_))));
        assert!(matches!(parse_config("[task]\ndelta_preset = \"rte\"\n"), Err(CliError::Config(_))));
        assert!(matches!(parse_config("mode = \"cluster\"\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        b.align.beta = 0.5;
        assert_ne!(fingerprint(&a), fingerprint(&b));
        assert_eq!(fingerprint(&a).len(), 64);
    }

    #[test]
    fn checkpoint_comment_round_trips() {
        let m = LinearMap::identity(2);
        let text = checkpoint_with_fingerprint(&m, "abc");
        assert!(text.contains("# fingerprint abc"));
        assert_eq!(LinearMap::from_checkpoint(&text).unwrap(), m);
    }
}
