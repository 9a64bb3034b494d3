//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Linear scan: the `k` points nearest to row `q` other than `q` itself,
/// ordered by distance then index.
pub fn brute_knn(points: &Array2<f64>, q: usize, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = (0..points.nrows())
        .filter(|&j| j != q)
        .map(|j| {
            let d2: f64 = points.row(q).iter().zip(points.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            (d2, j)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d2, j)| (j, d2.sqrt())).collect()
}

/// Dense KKT solve of `min wᵀ(C + εI)w` subject to `Σ w = 1`, where
/// `C_jl = (x - n_j)·(x - n_l)`. `ε = ridge · tr(C)` when `k > d` or the
/// condition number of `C` exceeds `max_condition`, otherwise 0. Returns
/// the weights and whether the ridge was applied.
pub fn kkt_weights(
    x: ArrayView1<'_, f64>,
    neighbors: &[ArrayView1<'_, f64>],
    ridge: f64,
    max_condition: f64,
) -> (Vec<f64>, bool) {
    let k = neighbors.len();
    let d = x.len();
    let c = DMatrix::from_fn(k, k, |j, l| {
        (0..d).map(|t| (x[t] - neighbors[j][t]) * (x[t] - neighbors[l][t])).sum::<f64>()
    });
    let sv = c.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    let regularize = k > d || lo <= 0.0 || hi / lo > max_condition;
    let eps = if regularize { ridge * c.trace() } else { 0.0 };
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    for j in 0..k {
        for l in 0..k {
            kkt[(j, l)] = 2.0 * (c[(j, l)] + if j == l { eps } else { 0.0 });
        }
        kkt[(j, k)] = 1.0;
        kkt[(k, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs[k] = 1.0;
    let sol = kkt.lu().solve(&rhs).expect("non-singular KKT system");
    (sol.iter().take(k).copied().collect(), regularize)
}

fn unit(v: ArrayView1<'_, f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn mean_of_top(mut v: Vec<f64>, k: usize) -> f64 {
    v.sort_by(|a, b| b.total_cmp(a));
    let k = k.min(v.len());
    v[..k].iter().sum::<f64>() / k as f64
}

/// Full CSLS score matrix (`queries x targets`) from already projected
/// queries, computed pairwise with no shared state.
pub fn brute_csls(projected: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, k: usize) -> Vec<Vec<f64>> {
    let xs: Vec<Vec<f64>> = projected.outer_iter().map(unit).collect();
    let ys: Vec<Vec<f64>> = targets.outer_iter().map(unit).collect();
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let r_t: Vec<f64> = xs.iter().map(|x| mean_of_top(ys.iter().map(|y| cos(x, y)).collect(), k)).collect();
    let r_s: Vec<f64> = ys.iter().map(|y| mean_of_top(xs.iter().map(|x| cos(x, y)).collect(), k)).collect();
    xs.iter()
        .enumerate()
        .map(|(i, x)| ys.iter().enumerate().map(|(j, y)| 2.0 * cos(x, y) - r_t[i] - r_s[j]).collect())
        .collect()
}

/// Index of the largest score, ties to the lowest index.
pub fn best(scores: &[f64]) -> usize {
    let mut b = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[b] {
            b = i;
        }
    }
    b
}

/// Orthogonal Procrustes solution `W = U Vᵀ` of `min ‖W X - Y‖` over the
/// given column pairs.
pub fn procrustes(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols();
    let xm = DMatrix::from_fn(d, x.nrows(), |r, c| x[[c, r]]);
    let ym = DMatrix::from_fn(d, y.nrows(), |r, c| y[[c, r]]);
    let svd = (ym * xm.transpose()).svd(true, true);
    let w = svd.u.expect("u") * svd.v_t.expect("v_t");
    Array2::from_shape_fn((d, d), |(i, j)| w[(i, j)])
}
