//! Alignment as a regularizer for pair classification and regression.
//!
//! A small alignment network `A` projects the first input of each pair into
//! the space of the second. The task network sees `[A(s1); s1; s2]` and is
//! trained on cross-entropy (classification) or squared error (regression),
//! plus per-pair alignment terms between `A(s1)` and `s2`:
//!
//! ```text
//! L = sum_i task_i + gamma * sum_i [ max(floor, d_i * mse_i) + max(floor, d_i * lpl_i) ]
//! ```
//!
//! `d_i` is the label's delta: positive values pull the pair together and
//! negative values push it apart, down to the floor. The locality term
//! reconstructs `s2_i` from the projected first inputs of the neighbors of
//! `s1_i` under frozen locally linear weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport, Projector};
use crate::lle::{self, LleWeights};
use crate::neighbors::{build_graph, KdIndex, NeighborGraph};
use crate::optim::{batches, Algorithm, Optimizer, OptimizerConfig};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    LeakyRelu,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu if z < 0.0 => LEAKY_SLOPE * z,
            Activation::Relu if z < 0.0 => 0.0,
            _ => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu if z < 0.0 => LEAKY_SLOPE,
            Activation::Relu if z < 0.0 => 0.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Raw affine output (the alignment network).
    Linear,
    /// Three class logits.
    Softmax3,
    /// One score squashed into `[0, 1]`.
    Sigmoid1,
}

/// One affine layer, `y = W x + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    pub output: OutputHead,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Trace {
    /// Input to every layer; the last entry is the raw output.
    inputs: Vec<Array1<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Array1<f64>>,
}

impl FfnParams {
    /// Layers of sizes `sizes[0] -> sizes[1] -> ...` with uniform Glorot
    /// weights and zero biases.
    pub fn xavier(sizes: &[usize], activation: Activation, output: OutputHead, rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least an input and an output size");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_fn((w[1], w[0]), |_| rng.random_range(-limit..limit)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        FfnParams {
            layers,
            activation,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    /// Checks that consecutive layer shapes chain and the head matches.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::Shape(format!("layer {i}: bias does not match weight rows")));
            }
            if i > 0 && l.weight.ncols() != self.layers[i - 1].weight.nrows() {
                return Err(Error::Shape(format!("layer {i}: input does not chain with layer {}", i - 1)));
            }
        }
        match (self.output, self.output_dim()) {
            (OutputHead::Softmax3, 3) | (OutputHead::Sigmoid1, 1) | (OutputHead::Linear, _) => Ok(()),
            (head, n) => Err(Error::Shape(format!("{head:?} head with {n} outputs"))),
        }
    }

    fn trace(&self, input: ArrayView1<'_, f64>) -> Trace {
        let mut inputs = vec![input.to_owned()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.weight.dot(inputs.last().expect("input")) + &l.bias;
            let a = if i < last { z.mapv(|v| self.activation.apply(v)) } else { z.clone() };
            pre.push(z);
            inputs.push(a);
        }
        Trace { inputs, pre }
    }

    /// Raw output of the last affine layer (logits for the softmax head).
    fn raw(&self, input: ArrayView1<'_, f64>) -> Array1<f64> {
        self.trace(input).inputs.pop().expect("output")
    }

    /// Backpropagates `d_out` (gradient w.r.t. the raw output), adding the
    /// parameter gradients into `grads` and returning the input gradient.
    fn backward(&self, trace: &Trace, d_out: Array1<f64>, grads: &mut FfnParams) -> Array1<f64> {
        let mut delta = d_out;
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                let act = self.activation;
                delta.zip_mut_with(&trace.pre[i], |d, &z| *d *= act.derivative(z));
            }
            let x = &trace.inputs[i];
            let g = &mut grads.layers[i];
            for (r, &dr) in delta.iter().enumerate() {
                if dr != 0.0 {
                    g.weight.row_mut(r).scaled_add(dr, x);
                }
                g.bias[r] += dr;
            }
            delta = self.layers[i].weight.t().dot(&delta);
        }
        delta
    }

    pub fn zeros_like(&self) -> Self {
        FfnParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            activation: self.activation,
            output: self.output,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in layer order, weight (row-major) then bias.
    pub fn to_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    /// Inverse of [`FfnParams::to_flat`]; returns the unread tail.
    pub fn set_flat<'a>(&mut self, mut flat: &'a [f64]) -> &'a [f64] {
        for l in &mut self.layers {
            let (w, rest) = flat.split_at(l.weight.len());
            l.weight.iter_mut().zip(w).for_each(|(p, v)| *p = *v);
            let (b, rest) = rest.split_at(l.bias.len());
            l.bias.iter_mut().zip(b).for_each(|(p, v)| *p = *v);
            flat = rest;
        }
        flat
    }
}

/// Forward pass: logits for the softmax head, a `[0, 1]` score for the
/// sigmoid head, the raw output otherwise.
pub fn ffn_forward(p: &FfnParams, input: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    p.validate()?;
    if input.len() != p.input_dim() {
        return Err(Error::Shape(format!("input has {} dims, network expects {}", input.len(), p.input_dim())));
    }
    let out = p.raw(input);
    Ok(match p.output {
        OutputHead::Sigmoid1 => out.mapv(sigmoid),
        _ => out,
    })
}

impl Projector for FfnParams {
    fn project(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("input has {} columns, network expects {}", x.ncols(), self.input_dim())));
        }
        let rows: Vec<Array1<f64>> = x.outer_iter().map(|r| self.raw(r)).collect();
        let views: Vec<ArrayView1<'_, f64>> = rows.iter().map(|r| r.view()).collect();
        ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }
}

/// `[f(s1); s1; s2]`.
pub fn build_task_input<P: Projector + ?Sized>(
    align_net: &P,
    s1: ArrayView1<'_, f64>,
    s2: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    let proj = align_net.project(s1.insert_axis(Axis(0)))?;
    concatenate(Axis(0), &[proj.row(0), s1, s2]).map_err(|e| Error::Shape(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classify,
    Regress,
}

/// Gold label of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TaskLabel {
    Class(usize),
    Score(f64),
}

/// Which objective terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub task: bool,
    pub mse: bool,
    pub lpl: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "mse+lpl")]
    MseLpl,
}

impl Variant {
    pub fn terms(self) -> LossTerms {
        LossTerms {
            task: true,
            mse: self != Variant::Baseline,
            lpl: self == Variant::MseLpl,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Mse => "mse",
            Variant::MseLpl => "mse+lpl",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "mse" => Ok(Variant::Mse),
            "mse+lpl" | "mse_lpl" => Ok(Variant::MseLpl),
            other => Err(Error::Config(format!("unknown loss variant {other:?}"))),
        }
    }
}

/// Default SNLI deltas; contradiction pairs carry no alignment pressure.
pub fn snli_deltas() -> BTreeMap<String, f64> {
    [("entailment", 100.0), ("neutral", -5.0), ("contradiction", 0.0)]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
}

/// SNLI deltas with a small positive weight on contradiction pairs.
pub fn snli_main_text_deltas() -> BTreeMap<String, f64> {
    [("entailment", 100.0), ("neutral", -5.0), ("contradiction", 1.0)]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
}

pub fn mnli_deltas() -> BTreeMap<String, f64> {
    [("entailment", 250.0), ("neutral", 1.0), ("contradiction", -10.0)]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
}

pub fn delta_preset(name: &str) -> Result<BTreeMap<String, f64>> {
    match name {
        "snli" => Ok(snli_deltas()),
        "snli_main_text" => Ok(snli_main_text_deltas()),
        "mnli" => Ok(mnli_deltas()),
        other => Err(Error::Config(format!("unknown delta preset {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Weight of the alignment terms.
    pub gamma: f64,
    /// Class names in output order (classification).
    pub labels: Vec<String>,
    /// Delta per class name (classification). Regression uses `2 y - 1`.
    pub delta: BTreeMap<String, f64>,
    pub clip_floor: f64,
    /// Largest divergence reward per pair in regression mode.
    pub margin: f64,
    /// Hidden width of the alignment network; 0 means the embedding size.
    pub align_hidden: usize,
    pub task_hidden: Vec<usize>,
    pub activation: Activation,
    pub k: usize,
    pub ridge: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Classify,
            gamma: 1.0,
            labels: vec!["entailment".into(), "neutral".into(), "contradiction".into()],
            delta: snli_deltas(),
            clip_floor: -1.0,
            margin: 0.1,
            align_hidden: 0,
            task_hidden: vec![256, 256],
            activation: Activation::LeakyRelu,
            k: 10,
            ridge: lle::DEFAULT_RIDGE,
            optimizer: OptimizerConfig {
                algorithm: Algorithm::Rmsprop,
                learning_rate: 1e-4,
                epochs: 100,
                batch_size: 32,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.clip_floor <= 0.0) {
            return Err(Error::Config(format!("clip_floor must be <= 0, got {}", self.clip_floor)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.kind == TaskKind::Classify {
            if self.labels.len() != 3 {
                return Err(Error::Config(format!("classification needs 3 labels, got {}", self.labels.len())));
            }
            for l in &self.labels {
                if !self.delta.contains_key(l) {
                    return Err(Error::Config(format!("no delta for label {l:?}")));
                }
            }
        }
        self.optimizer.validate()
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    /// The delta attached to one gold label.
    pub fn delta_for(&self, label: TaskLabel) -> Result<f64> {
        match (self.kind, label) {
            (TaskKind::Classify, TaskLabel::Class(c)) => {
                let name = self.labels.get(c).ok_or_else(|| Error::UnknownLabel(c.to_string()))?;
                self.delta.get(name).copied().ok_or_else(|| Error::UnknownLabel(name.clone()))
            }
            (TaskKind::Regress, TaskLabel::Score(y)) if (0.0..=1.0).contains(&y) => Ok(2.0 * y - 1.0),
            (_, other) => Err(Error::UnknownLabel(format!("{other:?}"))),
        }
    }

    /// Lowest value a single clipped alignment term may take.
    pub fn floor(&self) -> f64 {
        match self.kind {
            TaskKind::Classify => self.clip_floor,
            TaskKind::Regress => self.clip_floor.max(-self.margin),
        }
    }
}

/// `(max(floor, delta * l_mse), max(floor, delta * l_lpl))` for one pair.
pub fn clipped_alignment_losses(cfg: &TaskConfig, l_mse: f64, l_lpl: f64, label: TaskLabel) -> Result<(f64, f64)> {
    let delta = cfg.delta_for(label)?;
    let floor = cfg.floor();
    Ok(((delta * l_mse).max(floor), (delta * l_lpl).max(floor)))
}

/// Pairs of embeddings with a gold label each.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub side1: Array2<f64>,
    pub side2: Array2<f64>,
    pub labels: Vec<TaskLabel>,
}

impl PairDataset {
    pub fn new(side1: Array2<f64>, side2: Array2<f64>, labels: Vec<TaskLabel>) -> Result<Self> {
        if side1.dim() != side2.dim() || side1.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "sides are {:?} and {:?} with {} labels",
                side1.dim(),
                side2.dim(),
                labels.len()
            )));
        }
        Ok(PairDataset { side1, side2, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.side1.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        PairDataset {
            side1: self.side1.select(Axis(0), rows),
            side2: self.side2.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

/// Reads `id1<TAB>id2<TAB>label` rows whose ids are tokens of `embeddings`.
pub fn load_pair_dataset(path: impl AsRef<Path>, embeddings: &EmbeddingMatrix, cfg: &TaskConfig) -> Result<PairDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pair_dataset(&text, embeddings, cfg)
}

pub fn parse_pair_dataset(text: &str, embeddings: &EmbeddingMatrix, cfg: &TaskConfig) -> Result<PairDataset> {
    let (mut rows1, mut rows2, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let resolve = |tok: &str| {
            embeddings.vocab().lookup(tok).ok_or_else(|| Error::UnknownToken {
                line,
                token: tok.to_owned(),
            })
        };
        rows1.push(resolve(fields[0])?);
        rows2.push(resolve(fields[1])?);
        let label = match cfg.kind {
            TaskKind::Classify => {
                let id = cfg
                    .label_id(fields[2])
                    .or_else(|| fields[2].parse::<usize>().ok().filter(|&c| c < cfg.labels.len()))
                    .ok_or_else(|| Error::UnknownLabel(fields[2].to_owned()))?;
                TaskLabel::Class(id)
            }
            TaskKind::Regress => {
                let y: f64 = fields[2].parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("not a score: {:?}", fields[2]),
                })?;
                if !(0.0..=1.0).contains(&y) {
                    return Err(Error::UnknownLabel(format!("score {y} outside [0, 1] on line {line}")));
                }
                TaskLabel::Score(y)
            }
        };
        labels.push(label);
    }
    PairDataset::new(
        embeddings.data().select(Axis(0), &rows1),
        embeddings.data().select(Axis(0), &rows2),
        labels,
    )
}

/// Alignment network plus task network.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub align: FfnParams,
    pub task: FfnParams,
}

impl TaskModel {
    pub fn new(dim: usize, cfg: &TaskConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = if cfg.align_hidden == 0 { dim } else { cfg.align_hidden };
        let align = FfnParams::xavier(&[dim, hidden, dim], cfg.activation, OutputHead::Linear, &mut rng);
        let (out, head) = match cfg.kind {
            TaskKind::Classify => (3, OutputHead::Softmax3),
            TaskKind::Regress => (1, OutputHead::Sigmoid1),
        };
        let mut sizes = vec![3 * dim];
        sizes.extend(&cfg.task_hidden);
        sizes.push(out);
        let task = FfnParams::xavier(&sizes, cfg.activation, head, &mut rng);
        TaskModel { align, task }
    }

    pub fn zeros_like(&self) -> Self {
        TaskModel {
            align: self.align.zeros_like(),
            task: self.task.zeros_like(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.align.n_params() + self.task.n_params());
        self.align.to_flat(&mut v);
        self.task.to_flat(&mut v);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let rest = self.align.set_flat(flat);
        let rest = self.task.set_flat(rest);
        assert!(rest.is_empty(), "flat parameter vector too long");
    }

    /// Applies one optimizer step with the given gradients.
    pub fn apply(&mut self, grads: &TaskModel, optimizer: &mut Optimizer) {
        let mut p = self.to_flat();
        optimizer.step(&mut p, &grads.to_flat());
        self.set_flat(&p);
    }

    fn output(&self, s1: ArrayView1<'_, f64>, s2: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let input = build_task_input(&self.align, s1, s2)?;
        ffn_forward(&self.task, input.view())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    Class(usize),
    Score(f64),
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &TaskModel, s1: ArrayView1<'_, f64>, s2: ArrayView1<'_, f64>) -> Result<Prediction> {
    let out = model.output(s1, s2)?;
    Ok(match model.task.output {
        OutputHead::Sigmoid1 => Prediction::Score(out[0]),
        _ => Prediction::Class(argmax(out.view())),
    })
}

pub fn predict_batch(model: &TaskModel, data: &PairDataset) -> Result<Vec<Prediction>> {
    (0..data.len())
        .map(|i| predict(model, data.side1.row(i), data.side2.row(i)))
        .collect()
}

/// Accuracy (classification) or Pearson correlation (regression).
pub fn score_predictions(preds: &[Prediction], data: &PairDataset) -> Result<f64> {
    match data.labels.first() {
        Some(TaskLabel::Class(_)) => {
            let p: Vec<usize> = preds.iter().map(|p| if let Prediction::Class(c) = p { *c } else { usize::MAX }).collect();
            let g: Vec<usize> = data.labels.iter().map(|l| if let TaskLabel::Class(c) = l { *c } else { usize::MAX }).collect();
            eval::accuracy(&p, &g)
        }
        Some(TaskLabel::Score(_)) => {
            let p: Vec<f64> = preds.iter().map(|p| if let Prediction::Score(s) = p { *s } else { f64::NAN }).collect();
            let g: Vec<f64> = data.labels.iter().map(|l| if let TaskLabel::Score(s) = l { *s } else { f64::NAN }).collect();
            eval::pearson(&p, &g)
        }
        None => Err(Error::Shape("empty evaluation set".into())),
    }
}

/// Training pairs with their frozen locality structure.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub data: PairDataset,
    pub graph: NeighborGraph,
    pub weights: LleWeights,
    /// Reconstruction error of each first input.
    pub lle: Vec<f64>,
    /// Delta of each pair, resolved from the config at preparation time.
    pub delta: Vec<f64>,
}

impl TrainingSet {
    /// Builds the neighbor graph and closed-form weights over the first
    /// inputs of `data` only.
    pub fn prepare(data: PairDataset, cfg: &TaskConfig) -> Result<Self> {
        let delta = data.labels.iter().map(|&l| cfg.delta_for(l)).collect::<Result<Vec<_>>>()?;
        let side1 = EmbeddingMatrix::from_array(data.side1.clone())?;
        let graph = build_graph(&KdIndex::new(data.side1.clone())?, cfg.k)?;
        let weights = lle::solve_weights_closed(&side1, &graph, cfg.ridge)?;
        let lle = lle::lle_point_losses(&side1, &graph, &weights)?;
        Ok(TrainingSet {
            data,
            graph,
            weights,
            lle,
            delta,
        })
    }
}

/// Objective value, its parts and gradients for one batch.
#[derive(Debug, Clone)]
pub struct TaskLoss {
    pub value: f64,
    pub task: f64,
    /// `(clipped mse, clipped lpl)` of every pair in the batch, before gamma.
    pub clipped: Vec<(f64, f64)>,
    /// Frozen `delta * lle` part of the reported value, before gamma.
    pub lle: f64,
    pub grads: TaskModel,
}

fn task_term(head: OutputHead, raw: &Array1<f64>, label: TaskLabel) -> Result<(f64, Array1<f64>)> {
    match (head, label) {
        (OutputHead::Softmax3, TaskLabel::Class(c)) if c < raw.len() => {
            let max = raw.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exp = raw.mapv(|z| (z - max).exp());
            let sum = exp.sum();
            let loss = sum.ln() + max - raw[c];
            let mut grad = exp / sum;
            grad[c] -= 1.0;
            Ok((loss, grad))
        }
        (OutputHead::Sigmoid1, TaskLabel::Score(y)) => {
            let s = sigmoid(raw[0]);
            Ok(((s - y) * (s - y), Array1::from_elem(1, 2.0 * (s - y) * s * (1.0 - s))))
        }
        (head, label) => Err(Error::UnknownLabel(format!("{label:?} for a {head:?} head"))),
    }
}

/// Full objective over the pairs `batch` of `set`.
pub fn task_total_loss(
    model: &TaskModel,
    cfg: &TaskConfig,
    set: &TrainingSet,
    batch: &[usize],
    terms: LossTerms,
) -> Result<TaskLoss> {
    let data = &set.data;
    let d = data.dim();
    let floor = cfg.floor();
    let gamma = cfg.gamma;
    let mut grads = model.zeros_like();

    // forward the alignment net once per needed first input
    let mut traces: BTreeMap<usize, Trace> = BTreeMap::new();
    for &i in batch {
        traces.entry(i).or_insert_with(|| model.align.trace(data.side1.row(i)));
        if terms.lpl {
            for &j in set.graph.neighbors(i) {
                traces.entry(j).or_insert_with(|| model.align.trace(data.side1.row(j)));
            }
        }
    }
    let proj = |i: usize| traces[&i].inputs.last().expect("output");
    let mut upstream: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
    let mut add_upstream = |i: usize, g: Array1<f64>| {
        upstream.entry(i).and_modify(|u| *u += &g).or_insert(g);
    };

    let (mut task_total, mut lle_total, mut value) = (0.0, 0.0, 0.0);
    let mut clipped = Vec::with_capacity(batch.len());
    for &i in batch {
        let s2 = data.side2.row(i);
        let p = proj(i);
        if terms.task {
            let input = concatenate(Axis(0), &[p.view(), data.side1.row(i), s2]).map_err(|e| Error::Shape(e.to_string()))?;
            let trace = model.task.trace(input.view());
            let (loss, d_raw) = task_term(model.task.output, trace.inputs.last().expect("output"), data.labels[i])?;
            task_total += loss;
            let d_input = model.task.backward(&trace, d_raw, &mut grads.task);
            add_upstream(i, d_input.slice(s![..d]).to_owned());
        }

        let delta = set.delta[i];
        let mut pair = (0.0, 0.0);
        if terms.mse {
            let r = p - &s2;
            let v = delta * r.dot(&r);
            pair.0 = v.max(floor);
            if v > floor && gamma != 0.0 {
                add_upstream(i, r * (2.0 * gamma * delta));
            }
        }
        if terms.lpl {
            let mut recon = Array1::zeros(d);
            for (rank, &j) in set.graph.neighbors(i).iter().enumerate() {
                recon.scaled_add(set.weights.w[[i, rank]], proj(j));
            }
            let r = &recon - &s2;
            let v = delta * r.dot(&r);
            pair.1 = v.max(floor);
            if v > floor && gamma != 0.0 {
                for (rank, &j) in set.graph.neighbors(i).iter().enumerate() {
                    add_upstream(j, &r * (2.0 * gamma * delta * set.weights.w[[i, rank]]));
                }
            }
            lle_total += delta * set.lle[i];
        }
        assert!(pair.0 >= cfg.clip_floor && pair.1 >= cfg.clip_floor, "clipped term below the floor");
        value += pair.0 + pair.1;
        clipped.push(pair);
    }

    for (i, g) in upstream {
        model.align.backward(&traces[&i], g, &mut grads.align);
    }
    let value = task_total + gamma * (value + lle_total);
    if !value.is_finite() {
        return Err(Error::Divergence { step: 0 });
    }
    Ok(TaskLoss {
        value,
        task: task_total,
        clipped,
        lle: lle_total,
        grads,
    })
}

/// Statistics collected while training one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    pub final_loss: f64,
    /// Smallest clipped alignment term seen in any step.
    pub min_clipped_term: Option<f64>,
}

/// Trains one model on the whole training set.
pub fn fit_task_model(cfg: &TaskConfig, set: &TrainingSet, variant: Variant, seed: u64) -> Result<(TaskModel, TrainStats)> {
    cfg.validate()?;
    let mut model = TaskModel::new(set.data.dim(), cfg, seed);
    let mut optimizer = Optimizer::new(&cfg.optimizer, model.to_flat().len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0fb_a7c4);
    let batch = cfg.optimizer.effective_batch(set.data.len());
    let terms = variant.terms();
    let mut stats = TrainStats {
        steps: 0,
        final_loss: f64::NAN,
        min_clipped_term: None,
    };
    for _ in 0..cfg.optimizer.epochs {
        let mut epoch_loss = 0.0;
        for rows in batches(set.data.len(), batch, &mut rng) {
            stats.steps += 1;
            let loss = task_total_loss(&model, cfg, set, &rows, terms).map_err(|e| match e {
                Error::Divergence { .. } => Error::Divergence { step: stats.steps },
                other => other,
            })?;
            if terms.mse || terms.lpl {
                let lo = loss.clipped.iter().map(|&(a, b)| match (terms.mse, terms.lpl) {
                    (true, true) => a.min(b),
                    (true, false) => a,
                    _ => b,
                });
                let lo = lo.fold(f64::INFINITY, f64::min);
                stats.min_clipped_term = Some(stats.min_clipped_term.map_or(lo, |m: f64| m.min(lo)));
            }
            epoch_loss += loss.value;
            model.apply(&loss.grads, &mut optimizer);
        }
        stats.final_loss = epoch_loss;
    }
    Ok((model, stats))
}

/// Result of a multi-fold run at one training-set size.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub models: Vec<TaskModel>,
    pub stats: Vec<TrainStats>,
    pub report: MetricsReport,
}

/// For each fold, samples `size` training pairs without replacement,
/// trains from a fold-specific seed and scores the test set. Fold `f` uses
/// seed `cfg.optimizer.seed + f`.
pub fn train_task(
    cfg: &TaskConfig,
    train: &PairDataset,
    test: &PairDataset,
    size: usize,
    folds: usize,
    variant: Variant,
) -> Result<TaskOutcome> {
    cfg.validate()?;
    if size > train.len() {
        return Err(Error::Config(format!("subset size {size} exceeds the {} training pairs", train.len())));
    }
    if size < 2 || folds == 0 {
        return Err(Error::Config("need a subset of at least 2 pairs and at least 1 fold".into()));
    }
    let mut models = Vec::with_capacity(folds);
    let mut stats = Vec::with_capacity(folds);
    let mut values = Vec::with_capacity(folds);
    let mut seeds = Vec::with_capacity(folds);
    for fold in 0..folds {
        let seed = cfg.optimizer.seed.wrapping_add(fold as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = sample(&mut rng, train.len(), size).into_vec();
        rows.sort_unstable();
        let set = TrainingSet::prepare(train.subset(&rows), cfg)?;
        let (model, st) = fit_task_model(cfg, &set, variant, seed)?;
        values.push(score_predictions(&predict_batch(&model, test)?, test)?);
        seeds.push(seed);
        models.push(model);
        stats.push(st);
    }
    let metric = match cfg.kind {
        TaskKind::Classify => "accuracy",
        TaskKind::Regress => "pearson",
    };
    let mut report = MetricsReport::from_runs(&values, &seeds)?.labeled(
        match cfg.kind {
            TaskKind::Classify => "task-classify",
            TaskKind::Regress => "task-regress",
        },
        variant.name(),
        metric,
    );
    report.train_size = Some(size);
    report.k = Some(cfg.k);
    Ok(TaskOutcome { models, stats, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg() -> TaskConfig {
        TaskConfig::default()
    }

    #[test]
    fn zero_net_sigmoid_is_half() {
        let p = FfnParams {
            layers: vec![
                Dense { weight: Array2::zeros((4, 3)), bias: Array1::zeros(4) },
                Dense { weight: Array2::zeros((1, 4)), bias: Array1::zeros(1) },
            ],
            activation: Activation::LeakyRelu,
            output: OutputHead::Sigmoid1,
        };
        for x in [array![1.0, -2.0, 3.0], array![0.0, 0.0, 0.0]] {
            assert_eq!(ffn_forward(&p, x.view()).unwrap()[0], 0.5);
        }
        assert!(ffn_forward(&p, array![1.0].view()).is_err());
    }

    #[test]
    fn single_layer_logits() {
        let p = FfnParams {
            layers: vec![Dense {
                weight: array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
                bias: array![0.5, 0.0, -1.0],
            }],
            activation: Activation::LeakyRelu,
            output: OutputHead::Softmax3,
        };
        assert_eq!(ffn_forward(&p, array![2.0, -3.0].view()).unwrap(), array![2.5, -3.0, -2.0]);
    }

    #[test]
    fn leaky_relu_hidden_layer() {
        let p = FfnParams {
            layers: vec![
                Dense { weight: array![[1.0], [-1.0]], bias: array![0.0, 0.0] },
                Dense { weight: array![[1.0, 1.0]], bias: array![0.0] },
            ],
            activation: Activation::LeakyRelu,
            output: OutputHead::Linear,
        };
        // hidden (2, -2) -> (2, -0.02)
        assert!((ffn_forward(&p, array![2.0].view()).unwrap()[0] - 1.98).abs() < 1e-15);
        let relu = FfnParams { activation: Activation::Relu, ..p };
        assert_eq!(ffn_forward(&relu, array![2.0].view()).unwrap()[0], 2.0);
    }

    #[test]
    fn validate_catches_broken_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = FfnParams::xavier(&[4, 5, 3], Activation::Relu, OutputHead::Softmax3, &mut rng);
        assert!(p.validate().is_ok());
        p.layers[1].weight = Array2::zeros((3, 6));
        assert!(p.validate().is_err());
        let q = FfnParams::xavier(&[4, 2], Activation::Relu, OutputHead::Sigmoid1, &mut rng);
        assert!(q.validate().is_err());
    }

    #[test]
    fn task_input_layout() {
        let id = crate::align::LinearMap::identity(2);
        let v = build_task_input(&id, array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap();
        assert_eq!(v, array![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn clipping() {
        let mut c = cfg();
        c.delta.insert("neutral".into(), 0.0);
        assert_eq!(clipped_alignment_losses(&c, 3.0, 4.0, TaskLabel::Class(1)).unwrap(), (0.0, 0.0));
        c.delta.insert("neutral".into(), -5.0);
        assert_eq!(clipped_alignment_losses(&c, 10.0, 0.1, TaskLabel::Class(1)).unwrap(), (-1.0, -0.5));
        let (m, _) = clipped_alignment_losses(&c, 0.02, 0.0, TaskLabel::Class(0)).unwrap();
        assert!((m - 2.0).abs() < 1e-12);
        assert!(matches!(
            clipped_alignment_losses(&c, 1.0, 1.0, TaskLabel::Class(7)),
            Err(Error::UnknownLabel(_))
        ));
        assert!(clipped_alignment_losses(&c, 1.0, 1.0, TaskLabel::Score(0.5)).is_err());
    }

    #[test]
    fn regression_delta_and_margin() {
        let c = TaskConfig {
            kind: TaskKind::Regress,
            ..cfg()
        };
        assert_eq!(c.delta_for(TaskLabel::Score(1.0)).unwrap(), 1.0);
        assert_eq!(c.delta_for(TaskLabel::Score(0.0)).unwrap(), -1.0);
        assert_eq!(c.delta_for(TaskLabel::Score(0.5)).unwrap(), 0.0);
        assert!(c.delta_for(TaskLabel::Score(1.5)).is_err());
        let (m, l) = clipped_alignment_losses(&c, 4.0, 0.05, TaskLabel::Score(0.0)).unwrap();
        assert_eq!((m, l), (-0.1, -0.05));
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(array![2.0, 1.0, 0.0].view()), 0);
        assert_eq!(argmax(array![1.0, 1.0, 0.0].view()), 0);
        assert_eq!(argmax(array![0.0, 1.0, 1.0].view()), 1);
    }

    #[test]
    fn flat_round_trip() {
        let m = TaskModel::new(3, &TaskConfig { task_hidden: vec![4], ..cfg() }, 1);
        let flat = m.to_flat();
        let mut z = m.zeros_like();
        z.set_flat(&flat);
        assert_eq!(z, m);
    }

    #[test]
    fn parses_dataset() {
        let emb = EmbeddingMatrix::new(
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            crate::embeddings::Vocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap(),
        )
        .unwrap();
        let c = cfg();
        let ds = parse_pair_dataset("a\tb\tentailment\nc\ta\t2\n", &emb, &c).unwrap();
        assert_eq!(ds.labels, vec![TaskLabel::Class(0), TaskLabel::Class(2)]);
        assert_eq!(ds.side1.row(1), array![1.0, 1.0]);
        assert!(matches!(parse_pair_dataset("a\tb\tmaybe\n", &emb, &c), Err(Error::UnknownLabel(_))));
        assert!(matches!(parse_pair_dataset("a\tz\t0\n", &emb, &c), Err(Error::UnknownToken { line: 1, .. })));
        let r = TaskConfig { kind: TaskKind::Regress, ..cfg() };
        assert!(parse_pair_dataset("a\tb\t1.2\n", &emb, &r).is_err());
        assert_eq!(parse_pair_dataset("a\tb\t0.25\n", &emb, &r).unwrap().labels, vec![TaskLabel::Score(0.25)]);
    }

    #[test]
    fn variant_names() {
        for v in [Variant::Baseline, Variant::Mse, Variant::MseLpl] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("lpl-only".parse::<Variant>().is_err());
    }

    fn small_set(kind: TaskKind, delta: [f64; 3]) -> (TaskConfig, TrainingSet) {
        let mut c = TaskConfig {
            kind,
            task_hidden: vec![5],
            k: 3,
            ..cfg()
        };
        for (name, v) in c.labels.clone().iter().zip(delta) {
            c.delta.insert(name.clone(), v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s1 = Array2::from_shape_fn((12, 3), |_| rng.random_range(-1.0..1.0));
        let s2 = Array2::from_shape_fn((12, 3), |_| rng.random_range(-1.0..1.0));
        let labels = (0..12)
            .map(|i| match kind {
                TaskKind::Classify => TaskLabel::Class(i % 3),
                TaskKind::Regress => TaskLabel::Score(i as f64 / 11.0),
            })
            .collect();
        let set = TrainingSet::prepare(PairDataset::new(s1, s2, labels).unwrap(), &c).unwrap();
        (c, set)
    }

    fn check_gradient(c: &TaskConfig, set: &TrainingSet, terms: LossTerms) {
        let model = TaskModel::new(3, c, 4);
        let batch = [0, 2, 5, 7, 10];
        let analytic = task_total_loss(&model, c, set, &batch, terms).unwrap().grads.to_flat();
        let base = model.to_flat();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut m = model.clone();
            let mut p = base.clone();
            p[i] += h;
            m.set_flat(&p);
            let up = task_total_loss(&m, c, set, &batch, terms).unwrap().value;
            p[i] -= 2.0 * h;
            m.set_flat(&p);
            let down = task_total_loss(&m, c, set, &batch, terms).unwrap().value;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - analytic[i]).abs();
            assert!(err <= 1e-5 * (1.0 + numeric.abs()), "param {i}: numeric {numeric} analytic {}", analytic[i]);
        }
    }

    const ALL: LossTerms = LossTerms { task: true, mse: true, lpl: true };

    #[test]
    fn gradient_unclipped_classification() {
        let (c, set) = small_set(TaskKind::Classify, [2.0, -0.01, 0.5]);
        check_gradient(&c, &set, ALL);
    }

    #[test]
    fn gradient_mixed_clipping() {
        // neutral pairs are pushed far below the floor and contribute nothing
        let (c, set) = small_set(TaskKind::Classify, [3.0, -100.0, 0.0]);
        check_gradient(&c, &set, ALL);
        check_gradient(&c, &set, LossTerms { task: false, mse: false, lpl: true });
    }

    #[test]
    fn gradient_regression() {
        let (c, set) = small_set(TaskKind::Regress, [0.0; 3]);
        check_gradient(&c, &set, ALL);
        let relu = TaskConfig { activation: Activation::Relu, ..c };
        check_gradient(&relu, &set, LossTerms { task: true, mse: true, lpl: false });
    }

    #[test]
    fn clipped_terms_respect_floor() {
        let (c, set) = small_set(TaskKind::Classify, [100.0, -1000.0, 0.0]);
        let model = TaskModel::new(3, &c, 0);
        let loss = task_total_loss(&model, &c, &set, &(0..12).collect::<Vec<_>>(), ALL).unwrap();
        for (i, &(m, l)) in loss.clipped.iter().enumerate() {
            assert!(m >= c.clip_floor && l >= c.clip_floor);
            if i % 3 == 1 {
                assert_eq!((m, l), (c.clip_floor, c.clip_floor));
            }
        }
    }

    #[test]
    fn zero_gamma_matches_baseline_bitwise() {
        let data = crate::synthetic::blob_pairs(30, 4, 0.8, 3);
        let c = TaskConfig {
            gamma: 0.0,
            task_hidden: vec![8],
            k: 4,
            optimizer: OptimizerConfig {
                epochs: 20,
                batch_size: 8,
                learning_rate: 1e-3,
                ..cfg().optimizer
            },
            ..cfg()
        };
        let set = TrainingSet::prepare(data, &c).unwrap();
        let (base, _) = fit_task_model(&c, &set, Variant::Baseline, 5).unwrap();
        let (reg, _) = fit_task_model(&c, &set, Variant::MseLpl, 5).unwrap();
        let (a, b) = (base.to_flat(), reg.to_flat());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    fn sign_step(delta: f64) -> (f64, f64) {
        let (mut c, set) = small_set(TaskKind::Classify, [delta; 3]);
        c.gamma = 1.0;
        let mut model = TaskModel::new(3, &c, 2);
        let dist = |m: &TaskModel| {
            let p = m.align.project(set.data.side1.slice(s![0..1, ..])).unwrap();
            let r = &p.row(0) - &set.data.side2.row(0);
            r.dot(&r)
        };
        let before = dist(&model);
        let terms = LossTerms { task: false, mse: true, lpl: false };
        let loss = task_total_loss(&model, &c, &set, &[0], terms).unwrap();
        let sgd = OptimizerConfig {
            algorithm: Algorithm::Sgd,
            learning_rate: 1e-3,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(&sgd, model.to_flat().len());
        model.apply(&loss.grads, &mut opt);
        (before, dist(&model))
    }

    #[test]
    fn delta_sign_sets_direction() {
        let (before, after) = sign_step(1.0);
        assert!(after < before);
        // small enough magnitude that the term stays above the floor
        let (before, after) = sign_step(-0.05);
        assert!(before * 0.05 < 1.0);
        assert!(after > before);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = crate::synthetic::blob_pairs(600, 6, 0.5, 1);
        let train = data.subset(&(0..300).collect::<Vec<_>>());
        let test = data.subset(&(300..600).collect::<Vec<_>>());
        let c = TaskConfig {
            task_hidden: vec![16],
            optimizer: OptimizerConfig {
                epochs: 30,
                learning_rate: 1e-3,
                ..cfg().optimizer
            },
            ..cfg()
        };
        let out = train_task(&c, &train, &test, 300, 1, Variant::Baseline).unwrap();
        assert!(out.report.mean >= 0.95, "accuracy {}", out.report.mean);
    }

    #[test]
    fn train_task_is_deterministic() {
        let data = crate::synthetic::blob_pairs(90, 4, 1.0, 7);
        let train = data.subset(&(0..60).collect::<Vec<_>>());
        let test = data.subset(&(60..90).collect::<Vec<_>>());
        let c = TaskConfig {
            task_hidden: vec![8],
            k: 4,
            optimizer: OptimizerConfig { epochs: 5, ..cfg().optimizer },
            ..cfg()
        };
        let a = train_task(&c, &train, &test, 30, 2, Variant::MseLpl).unwrap();
        let b = train_task(&c, &train, &test, 30, 2, Variant::MseLpl).unwrap();
        assert_eq!(a.models, b.models);
        assert_eq!(a.report.values, b.report.values);
        assert_eq!(a.report.seeds, vec![0, 1]);
        assert!(a.stats.iter().all(|s| s.min_clipped_term.unwrap() >= c.clip_floor));
        assert!(train_task(&c, &train, &test, 61, 1, Variant::Baseline).is_err());
    }
}
