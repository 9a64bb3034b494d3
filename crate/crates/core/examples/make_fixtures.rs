//! Regenerates the bundled fixtures: `cargo run --example make_fixtures [dir]`.

use std::fs;
use std::path::Path;

use lpalign::embeddings::{format_embeddings, format_lexicon, EmbeddingFormat, EmbeddingMatrix, Vocabulary};
use lpalign::synthetic::{relation_pairs, rotation_instance, RelationSpec, RotationSpec};
use lpalign::tasker::TaskLabel;
use ndarray::{concatenate, Array2, Axis};

const LABELS: [&str; 3] = ["entailment", "neutral", "contradiction"];

fn rotation(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let inst = rotation_instance(&RotationSpec::default());
    let fmt = EmbeddingFormat::Word2vecText;
    fs::write(dir.join("src.txt"), format_embeddings(&inst.source, fmt)).unwrap();
    fs::write(dir.join("tgt.txt"), format_embeddings(&inst.target, fmt)).unwrap();
    let (sv, tv) = (inst.source.vocab(), inst.target.vocab());
    fs::write(dir.join("train.tsv"), format_lexicon(&inst.train, sv, tv)).unwrap();
    fs::write(dir.join("test.tsv"), format_lexicon(&inst.test, sv, tv)).unwrap();
}

fn toy_task(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let data = relation_pairs(&RelationSpec {
        n: 500,
        purity: 0.5,
        ..Default::default()
    });
    let n = data.len();
    let rows: Array2<f64> = concatenate(Axis(0), &[data.side1.view(), data.side2.view()]).unwrap();
    let tokens = (0..n).map(|i| format!("a{i}")).chain((0..n).map(|i| format!("b{i}"))).collect();
    let emb = EmbeddingMatrix::new(rows, Vocabulary::new(tokens).unwrap()).unwrap();
    fs::write(dir.join("emb.txt"), format_embeddings(&emb, EmbeddingFormat::Word2vecText)).unwrap();
    let split = |range: std::ops::Range<usize>| {
        range
            .map(|i| match data.labels[i] {
                TaskLabel::Class(c) => format!("a{i}\tb{i}\t{}\n", LABELS[c]),
                TaskLabel::Score(s) => format!("a{i}\tb{i}\t{s}\n"),
            })
            .collect::<String>()
    };
    fs::write(dir.join("train.tsv"), split(0..300)).unwrap();
    fs::write(dir.join("test.tsv"), split(300..n)).unwrap();
}

fn main() {
    let root = std::env::args().nth(1).unwrap_or_else(|| "fixtures".into());
    let root = Path::new(&root);
    rotation(&root.join("rotation"));
    toy_task(&root.join("toy_task"));
    fs::write(root.join("collinear.txt"), "4 2\np0 0 0\np1 1 0\np2 3 0\np3 6 0\n").unwrap();
}
