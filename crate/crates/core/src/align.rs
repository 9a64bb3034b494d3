//! Linear alignment of a source manifold onto a target manifold.
//!
//! The map is trained in two phases. Locally linear weights are fitted on
//! the source manifold first and then frozen; the map weight is then fitted
//! by gradient descent on
//!
//! ```text
//! L = L_mse + beta * L_lpl + L_lle + lambda_ortho * |W W^T - I|_F^2
//! ```
//!
//! where `L_lle` is constant once the weights are frozen and is reported but
//! never differentiated.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{normalize, EmbeddingMatrix, Lexicon, Normalization};
use crate::error::{Error, Result};
use crate::lle::{self, LleWeights};
use crate::neighbors::{build_graph, build_index, NeighborGraph};
use crate::optim::{batches, Optimizer, OptimizerConfig};

const CHECKPOINT_MAGIC: &str = "lpalign-linear-map";
const CHECKPOINT_VERSION: u32 = 1;

/// The linear map `f(x) = W x`, applied to row vectors as `X W^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: Array2<f64>,
}

impl LinearMap {
    pub fn new(weight: Array2<f64>) -> Result<Self> {
        if !weight.is_square() {
            return Err(Error::Shape(format!("map weight must be square, got {:?}", weight.dim())));
        }
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("map weight has non-finite entries".into()));
        }
        Ok(LinearMap { weight })
    }

    pub fn identity(d: usize) -> Self {
        LinearMap {
            weight: Array2::eye(d),
        }
    }

    /// Uniform Glorot-style initialization.
    pub fn xavier(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (6.0 / (2 * d) as f64).sqrt();
        LinearMap {
            weight: Array2::from_shape_fn((d, d), |_| rng.random_range(-limit..limit)),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Text checkpoint: a `lpalign-linear-map <version> <d>` header followed
    /// by the row-major weight in shortest round-trip form. Lines starting
    /// with `#` after the header are ignored on load.
    pub fn to_checkpoint(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {}\n", self.dim());
        for row in self.weight.outer_iter() {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let fields: Vec<&str> = header.split_whitespace().collect();
        let bad = |msg: String| Error::MalformedHeader { line: 1, msg };
        if fields.len() != 3 || fields[0] != CHECKPOINT_MAGIC {
            return Err(bad(format!("not a linear map checkpoint: {header:?}")));
        }
        if fields[1] != CHECKPOINT_VERSION.to_string() {
            return Err(bad(format!("unsupported checkpoint version {}", fields[1])));
        }
        let d: usize = fields[2].parse().map_err(|_| bad(format!("bad dimension {:?}", fields[2])))?;
        let mut values = Vec::with_capacity(d * d);
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 2;
            let start = values.len();
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("not a number: {tok:?}"),
                })?);
            }
            if values.len() - start != d {
                return Err(Error::DimensionMismatch {
                    line: lineno,
                    expected: d,
                    found: values.len() - start,
                });
            }
            rows += 1;
        }
        if rows != d {
            return Err(Error::RowCount { expected: d, found: rows });
        }
        LinearMap::new(Array2::from_shape_vec((d, d), values).map_err(|e| Error::Shape(e.to_string()))?)
    }
}

/// Maps every row of `x` through `f`.
pub fn apply_map(f: &LinearMap, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != f.dim() {
        return Err(Error::Shape(format!("input has {} columns, map expects {}", x.ncols(), f.dim())));
    }
    Ok(x.dot(&f.weight.t()))
}

/// A scalar loss and its gradient with respect to the map weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

impl LossGrad {
    fn zero(d: usize) -> Self {
        LossGrad {
            value: 0.0,
            grad: Array2::zeros((d, d)),
        }
    }

    /// Accumulates `|W x - y|^2` and its gradient `2 (W x - y) x^T`.
    fn add_squared_residual(&mut self, weight: &Array2<f64>, x: &Array1<f64>, y: ndarray::ArrayView1<'_, f64>) {
        let r = weight.dot(x) - y;
        self.value += r.dot(&r);
        let d = x.len();
        for a in 0..d {
            let ra = 2.0 * r[a];
            for b in 0..d {
                self.grad[[a, b]] += ra * x[b];
            }
        }
    }
}

fn check_pair_inputs(f: &LinearMap, src: &EmbeddingMatrix, tgt: &EmbeddingMatrix, lex: &Lexicon) -> Result<()> {
    if lex.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    if src.dim() != f.dim() || tgt.dim() != f.dim() {
        return Err(Error::Shape(format!(
            "map is {}-d, source is {}-d, target is {}-d",
            f.dim(),
            src.dim(),
            tgt.dim()
        )));
    }
    lex.validate(src.len(), tgt.len())
}

fn mse_on(f: &LinearMap, src: &EmbeddingMatrix, tgt: &EmbeddingMatrix, pairs: &[(usize, usize)]) -> LossGrad {
    let mut out = LossGrad::zero(f.dim());
    for &(s, t) in pairs {
        out.add_squared_residual(&f.weight, &src.row(s).to_owned(), tgt.row(t));
    }
    out
}

/// Weighted neighbor combination `sum_j w_ij m_j` of source row `i`.
fn reconstruct(src: &EmbeddingMatrix, g: &NeighborGraph, w: &LleWeights, i: usize) -> Array1<f64> {
    let mut acc = Array1::zeros(src.dim());
    for (rank, &j) in g.neighbors(i).iter().enumerate() {
        acc.scaled_add(w.w[[i, rank]], &src.row(j));
    }
    acc
}

fn lpl_on(
    f: &LinearMap,
    src: &EmbeddingMatrix,
    tgt: &EmbeddingMatrix,
    pairs: &[(usize, usize)],
    g: &NeighborGraph,
    w: &LleWeights,
) -> LossGrad {
    // f is linear, so sum_j w_ij f(m_j) = f(sum_j w_ij m_j)
    let mut out = LossGrad::zero(f.dim());
    for &(s, t) in pairs {
        out.add_squared_residual(&f.weight, &reconstruct(src, g, w, s), tgt.row(t));
    }
    out
}

fn check_weights(src: &EmbeddingMatrix, g: &NeighborGraph, w: &LleWeights) -> Result<()> {
    if g.len() != src.len() || w.len() != src.len() || w.k != g.k || w.w.ncols() != g.k {
        return Err(Error::Shape(format!(
            "missing weight rows: source has {} rows, graph {}x{}, weights {:?}",
            src.len(),
            g.len(),
            g.k,
            w.w.dim()
        )));
    }
    Ok(())
}

/// `sum_{(s,t) in lex} |f(m_s) - m_t|^2` and its gradient.
pub fn mse_loss(f: &LinearMap, src: &EmbeddingMatrix, tgt: &EmbeddingMatrix, lex: &Lexicon) -> Result<LossGrad> {
    check_pair_inputs(f, src, tgt, lex)?;
    Ok(mse_on(f, src, tgt, &lex.pairs))
}

/// `sum_{(s,t) in lex} |m_t - sum_j W_sj f(m_j)|^2` over the source
/// neighbors `j` of `s`, with the reconstruction weights held fixed.
pub fn lpl_loss(
    f: &LinearMap,
    src: &EmbeddingMatrix,
    tgt: &EmbeddingMatrix,
    lex: &Lexicon,
    g: &NeighborGraph,
    w: &LleWeights,
) -> Result<LossGrad> {
    check_pair_inputs(f, src, tgt, lex)?;
    check_weights(src, g, w)?;
    Ok(lpl_on(f, src, tgt, &lex.pairs, g, w))
}

/// `|W W^T - I|_F^2` with gradient `4 (W W^T - I) W`.
pub fn ortho_penalty(f: &LinearMap) -> LossGrad {
    let d = f.dim();
    let gap = f.weight.dot(&f.weight.t()) - Array2::<f64>::eye(d);
    LossGrad {
        value: gap.iter().map(|v| v * v).sum(),
        grad: gap.dot(&f.weight) * 4.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSolver {
    #[default]
    Closed,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapInit {
    #[default]
    Identity,
    Xavier,
}

impl FromStr for MapInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(MapInit::Identity),
            "xavier" => Ok(MapInit::Xavier),
            other => Err(Error::Config(format!("unknown init {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Weight of the locality preserving term.
    pub beta: f64,
    pub lambda_ortho: f64,
    /// Neighborhood size for the source graph.
    pub k: usize,
    pub ridge: f64,
    pub weight_solver: WeightSolver,
    /// Optimizer for the weight solver when it is `sgd`.
    pub weight_optimizer: OptimizerConfig,
    pub init: MapInit,
    pub preprocess: Normalization,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            beta: 0.7,
            lambda_ortho: 1.0,
            k: 10,
            ridge: lle::DEFAULT_RIDGE,
            weight_solver: WeightSolver::Closed,
            weight_optimizer: OptimizerConfig {
                learning_rate: 0.05,
                epochs: 2000,
                ..OptimizerConfig::default()
            },
            init: MapInit::Identity,
            preprocess: Normalization::UnitCenterUnit,
            patience: 10,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lambda_ortho >= 0.0) {
            return Err(Error::Config(format!("lambda_ortho must be >= 0, got {}", self.lambda_ortho)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config("ridge must be >= 0".into()));
        }
        self.optimizer.validate()?;
        if self.weight_solver == WeightSolver::Sgd {
            self.weight_optimizer.validate()?;
        }
        Ok(())
    }
}

/// The four loss terms evaluated at one map.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub mse: LossGrad,
    pub lpl: LossGrad,
    /// Reconstruction error of the lexicon sources; constant in the map.
    pub lle: f64,
    pub ortho: LossGrad,
}

/// Combines the terms; the gradient leaves out the frozen `lle` term.
pub fn total_loss(cfg: &AlignConfig, parts: &LossParts) -> LossGrad {
    LossGrad {
        value: parts.mse.value + cfg.beta * parts.lpl.value + parts.lle + cfg.lambda_ortho * parts.ortho.value,
        grad: &parts.mse.grad + &(&parts.lpl.grad * cfg.beta) + &(&parts.ortho.grad * cfg.lambda_ortho),
    }
}

/// Evaluates every term on the full lexicon.
pub fn loss_parts(
    f: &LinearMap,
    src: &EmbeddingMatrix,
    tgt: &EmbeddingMatrix,
    lex: &Lexicon,
    g: &NeighborGraph,
    w: &LleWeights,
) -> Result<LossParts> {
    let mse = mse_loss(f, src, tgt, lex)?;
    let lpl = lpl_loss(f, src, tgt, lex, g, w)?;
    let per_point = lle::lle_point_losses(src, g, w)?;
    Ok(LossParts {
        mse,
        lpl,
        lle: lex.sources().map(|s| per_point[s]).sum(),
        ortho: ortho_penalty(f),
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_mse: f64,
    pub l_lpl: f64,
    pub l_lle: f64,
    pub l_ortho: f64,
    pub total: f64,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedAlignment {
    pub map: LinearMap,
    /// Source and target after preprocessing; retrieval should use these.
    pub source: EmbeddingMatrix,
    pub target: EmbeddingMatrix,
    pub graph: NeighborGraph,
    pub weights: LleWeights,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainedAlignment {
    /// Training log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec).expect("plain record"));
            out.push('\n');
        }
        out
    }
}

/// Mean squared distance between mapped sources and targets.
pub fn mean_squared_error(f: &LinearMap, src: &EmbeddingMatrix, tgt: &EmbeddingMatrix, lex: &Lexicon) -> Result<f64> {
    Ok(mse_loss(f, src, tgt, lex)?.value / lex.len() as f64)
}

/// Phase 1: neighbor graph and frozen reconstruction weights on `src`.
pub fn fit_locality(cfg: &AlignConfig, src: &EmbeddingMatrix) -> Result<(NeighborGraph, LleWeights)> {
    let graph = build_graph(&build_index(src)?, cfg.k)?;
    let weights = match cfg.weight_solver {
        WeightSolver::Closed => lle::solve_weights_closed(src, &graph, cfg.ridge)?,
        WeightSolver::Sgd => lle::fit_weights_sgd(src, &graph, &cfg.weight_optimizer)?,
    };
    Ok((graph, weights))
}

/// Phase 2 with given frozen weights. Returns the map with the lowest
/// validation error (or the last one without validation pairs) and the log.
pub fn fit_map(
    cfg: &AlignConfig,
    src: &EmbeddingMatrix,
    tgt: &EmbeddingMatrix,
    lex_train: &Lexicon,
    lex_val: &Lexicon,
    graph: &NeighborGraph,
    weights: &LleWeights,
) -> Result<(LinearMap, Vec<EpochRecord>, usize)> {
    cfg.validate()?;
    if src.dim() != tgt.dim() {
        return Err(Error::Shape(format!("source is {}-d, target is {}-d", src.dim(), tgt.dim())));
    }
    check_pair_inputs(&LinearMap::identity(src.dim()), src, tgt, lex_train)?;
    lex_val.validate(src.len(), tgt.len())?;
    check_weights(src, graph, weights)?;

    let d = src.dim();
    let mut map = match cfg.init {
        MapInit::Identity => LinearMap::identity(d),
        MapInit::Xavier => LinearMap::xavier(d, cfg.optimizer.seed),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed);
    let mut optimizer = Optimizer::new(&cfg.optimizer, d * d);
    let batch = cfg.optimizer.effective_batch(lex_train.len());

    let mut log = Vec::new();
    let record = |epoch: usize, map: &LinearMap| -> Result<EpochRecord> {
        let parts = loss_parts(map, src, tgt, lex_train, graph, weights)?;
        let total = total_loss(cfg, &parts).value;
        if !total.is_finite() {
            return Err(Error::Divergence { step: epoch });
        }
        let val_mse = if lex_val.is_empty() {
            None
        } else {
            Some(mean_squared_error(map, src, tgt, lex_val)?)
        };
        Ok(EpochRecord {
            epoch,
            l_mse: parts.mse.value,
            l_lpl: parts.lpl.value,
            l_lle: parts.lle,
            l_ortho: parts.ortho.value,
            total,
            val_mse,
        })
    };

    log.push(record(0, &map)?);
    let mut best = (map.clone(), log[0].val_mse.unwrap_or(f64::INFINITY), 0usize);
    for epoch in 1..=cfg.optimizer.epochs {
        for rows in batches(lex_train.len(), batch, &mut rng) {
            let pairs: Vec<(usize, usize)> = rows.iter().map(|&i| lex_train.pairs[i]).collect();
            let mut grad = mse_on(&map, src, tgt, &pairs).grad;
            if cfg.beta != 0.0 {
                grad.scaled_add(cfg.beta, &lpl_on(&map, src, tgt, &pairs, graph, weights).grad);
            }
            if cfg.lambda_ortho != 0.0 {
                grad.scaled_add(cfg.lambda_ortho, &ortho_penalty(&map).grad);
            }
            optimizer.step(
                map.weight.as_slice_mut().expect("standard layout"),
                grad.as_slice().expect("standard layout"),
            );
        }
        let rec = record(epoch, &map)?;
        if let Some(v) = rec.val_mse {
            if v < best.1 {
                best = (map.clone(), v, epoch);
            }
        }
        log.push(rec);
        if !lex_val.is_empty() && cfg.patience > 0 && epoch - best.2 >= cfg.patience {
            break;
        }
    }
    if lex_val.is_empty() {
        let last = log.last().expect("initial record").epoch;
        return Ok((map, log, last));
    }
    Ok((best.0, log, best.2))
}

/// Full two-phase training: preprocess both manifolds, fit and freeze the
/// source reconstruction weights, then fit the map.
pub fn train_align(
    cfg: &AlignConfig,
    src: &EmbeddingMatrix,
    tgt: &EmbeddingMatrix,
    lex_train: &Lexicon,
    lex_val: &Lexicon,
) -> Result<TrainedAlignment> {
    cfg.validate()?;
    if lex_train.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    let train_pairs: std::collections::HashSet<_> = lex_train.pairs.iter().collect();
    if let Some(p) = lex_val.pairs.iter().find(|p| train_pairs.contains(p)) {
        return Err(Error::Config(format!("validation pair {p:?} also appears in training")));
    }
    let source = normalize(src, cfg.preprocess)?;
    let target = normalize(tgt, cfg.preprocess)?;
    let (graph, weights) = fit_locality(cfg, &source)?;
    let (map, log, best_epoch) = fit_map(cfg, &source, &target, lex_train, lex_val, &graph, &weights)?;
    Ok(TrainedAlignment {
        map,
        source,
        target,
        graph,
        weights,
        log,
        best_epoch,
    })
}
