//! Locally linear reconstruction weights.
//!
//! Every point `m_i` is approximated by an affine combination of its graph
//! neighbors, `m_i ~ sum_j w_ij m_j` with `sum_j w_ij = 1`. The weights are
//! found either exactly from the local Gram system or by projected gradient
//! descent.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::neighbors::NeighborGraph;
use crate::optim::{batches, Optimizer, OptimizerConfig};

/// Condition number above which the local Gram matrix gets a ridge term.
pub const MAX_GRAM_CONDITION: f64 = 1e10;

/// Default ridge, relative to the trace of the local Gram matrix.
pub const DEFAULT_RIDGE: f64 = 1e-3;

/// Per-point reconstruction coefficients, one row per point and one column
/// per neighbor rank of the graph they were fitted against.
#[derive(Debug, Clone, PartialEq)]
pub struct LleWeights {
    pub k: usize,
    pub w: Array2<f64>,
}

impl LleWeights {
    pub fn uniform(n: usize, k: usize) -> Self {
        LleWeights {
            k,
            w: Array2::from_elem((n, k), 1.0 / k as f64),
        }
    }

    pub fn len(&self) -> usize {
        self.w.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.w.nrows() == 0
    }

    /// `point_id<TAB>neighbor_rank<TAB>weight` rows. Values are written in
    /// shortest round-trip form, so equal weights give equal bytes.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, row) in self.w.outer_iter().enumerate() {
            for (r, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{i}\t{r}\t{v}");
            }
        }
        out
    }
}

fn check_shapes(m: &EmbeddingMatrix, g: &NeighborGraph) -> Result<()> {
    if g.len() != m.len() {
        return Err(Error::Shape(format!("graph has {} rows, matrix has {}", g.len(), m.len())));
    }
    if let Some(&bad) = g.neighbor_ids.iter().find(|&&j| j >= m.len()) {
        return Err(Error::IndexOutOfBounds { index: bad, len: m.len() });
    }
    Ok(())
}

/// Weights of one point against the given neighbor rows.
pub fn solve_point(m: &EmbeddingMatrix, point: usize, neighbors: &[usize], ridge: f64) -> Result<Vec<f64>> {
    let k = neighbors.len();
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let d = m.dim();
    let x = m.row(point);
    let diffs = DMatrix::from_fn(k, d, |j, c| x[c] - m.data()[[neighbors[j], c]]);
    let mut gram = &diffs * diffs.transpose();
    let trace = gram.trace();
    if trace == 0.0 {
        // point coincides with all of its neighbors; any affine weights reconstruct it
        return Ok(vec![1.0 / k as f64; k]);
    }
    let eig = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let ill_conditioned = lo <= 0.0 || hi / lo > MAX_GRAM_CONDITION;
    if k > d || ill_conditioned {
        if ridge <= 0.0 {
            return Err(Error::Singular { point });
        }
        gram += DMatrix::identity(k, k) * (ridge * trace);
    }
    let z = gram
        .lu()
        .solve(&DVector::from_element(k, 1.0))
        .ok_or(Error::Singular { point })?;
    let total = z.sum();
    if !total.is_finite() || total == 0.0 {
        return Err(Error::Singular { point });
    }
    Ok(z.iter().map(|v| v / total).collect())
}

/// Exact constrained least-squares weights for every point of the graph.
pub fn solve_weights_closed(m: &EmbeddingMatrix, g: &NeighborGraph, ridge: f64) -> Result<LleWeights> {
    check_shapes(m, g)?;
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be >= 0, got {ridge}")));
    }
    let rows: Vec<Vec<f64>> = (0..m.len())
        .into_par_iter()
        .map(|i| solve_point(m, i, g.neighbors(i).as_slice().expect("standard layout"), ridge))
        .collect::<Result<_>>()?;
    let mut w = Array2::zeros((m.len(), g.k));
    for (i, row) in rows.into_iter().enumerate() {
        for (r, v) in row.into_iter().enumerate() {
            w[[i, r]] = v;
        }
    }
    Ok(LleWeights { k: g.k, w })
}

fn residual(m: &EmbeddingMatrix, g: &NeighborGraph, w: &LleWeights, i: usize) -> Array1<f64> {
    let mut r = m.row(i).to_owned();
    for (rank, &j) in g.neighbors(i).iter().enumerate() {
        r.scaled_add(-w.w[[i, rank]], &m.row(j));
    }
    r
}

/// Reconstruction error of every point.
pub fn lle_point_losses(m: &EmbeddingMatrix, g: &NeighborGraph, w: &LleWeights) -> Result<Vec<f64>> {
    check_shapes(m, g)?;
    if w.w.dim() != (m.len(), g.k) {
        return Err(Error::Shape(format!("weights are {:?}, graph is {}x{}", w.w.dim(), m.len(), g.k)));
    }
    Ok((0..m.len())
        .map(|i| {
            let r = residual(m, g, w, i);
            r.dot(&r)
        })
        .collect())
}

/// Total reconstruction error `sum_i |m_i - sum_j w_ij m_j|^2`.
pub fn lle_loss(m: &EmbeddingMatrix, g: &NeighborGraph, w: &LleWeights) -> Result<f64> {
    Ok(lle_point_losses(m, g, w)?.iter().sum())
}

/// Loss together with its gradient with respect to every weight.
pub fn lle_loss_grad(m: &EmbeddingMatrix, g: &NeighborGraph, w: &LleWeights) -> Result<(f64, Array2<f64>)> {
    check_shapes(m, g)?;
    let mut grad = Array2::zeros(w.w.raw_dim());
    let mut total = 0.0;
    for i in 0..m.len() {
        let r = residual(m, g, w, i);
        total += r.dot(&r);
        for (rank, &j) in g.neighbors(i).iter().enumerate() {
            grad[[i, rank]] = -2.0 * r.dot(&m.row(j));
        }
    }
    Ok((total, grad))
}

/// Fits the weights by projected gradient descent from the uniform `1/k`
/// start. Each epoch visits the points in mini-batches; gradients are
/// projected onto the sum-zero subspace and rows are pulled back onto the
/// sum-one plane after every update.
pub fn fit_weights_sgd(m: &EmbeddingMatrix, g: &NeighborGraph, opt: &OptimizerConfig) -> Result<LleWeights> {
    check_shapes(m, g)?;
    opt.validate()?;
    let (n, k) = (m.len(), g.k);
    let mut weights = LleWeights::uniform(n, k);
    if k == 0 {
        return Ok(weights);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut optimizer = Optimizer::new(opt, n * k);
    let batch = opt.effective_batch(n);
    let mut step = 0;
    for _ in 0..opt.epochs {
        for rows in batches(n, batch, &mut rng) {
            step += 1;
            let mut grad = vec![0.0; n * k];
            for &i in &rows {
                let r = residual(m, g, &weights, i);
                let gi: Vec<f64> = g.neighbors(i).iter().map(|&j| -2.0 * r.dot(&m.row(j))).collect();
                let mean = gi.iter().sum::<f64>() / k as f64;
                for (rank, v) in gi.into_iter().enumerate() {
                    grad[i * k + rank] = v - mean;
                }
            }
            optimizer.step(weights.w.as_slice_mut().expect("standard layout"), &grad);
            for &i in &rows {
                let mut row = weights.w.row_mut(i);
                let shift = (1.0 - row.sum()) / k as f64;
                row.mapv_inplace(|v| v + shift);
            }
            let loss: f64 = rows.iter().map(|&i| {
                let r = residual(m, g, &weights, i);
                r.dot(&r)
            }).sum();
            if !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
        }
    }
    Ok(weights)
}
