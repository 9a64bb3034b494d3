//! Synthetic instances with known ground truth, used by the fixtures and
//! the acceptance suite.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embeddings::{EmbeddingMatrix, Lexicon, Vocabulary};
use crate::tasker::{PairDataset, TaskLabel};

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// the signs of `R`'s diagonal folded into `Q`).
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    Array2::from_shape_fn((d, d), |(i, j)| {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * s
    })
}

/// Rows drawn uniformly from the unit sphere.
pub fn unit_gaussian_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::<f64>::from_shape_fn((n, d), |_| StandardNormal.sample(rng));
    for mut row in m.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationSpec {
    pub n: usize,
    pub d: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Standard deviation of Gaussian noise added to every target entry.
    pub noise: f64,
    pub seed: u64,
}

impl Default for RotationSpec {
    fn default() -> Self {
        RotationSpec {
            n: 500,
            d: 10,
            train: 50,
            val: 0,
            test: 100,
            noise: 0.0,
            seed: 0,
        }
    }
}

/// Source points and their images under a hidden orthogonal map, with
/// disjoint train/validation/test lexicons over the row pairs `(i, i)`.
#[derive(Debug, Clone)]
pub struct RotationInstance {
    pub source: EmbeddingMatrix,
    pub target: EmbeddingMatrix,
    pub rotation: Array2<f64>,
    pub train: Lexicon,
    pub val: Lexicon,
    pub test: Lexicon,
}

pub fn rotation_instance(spec: &RotationSpec) -> RotationInstance {
    assert!(spec.train + spec.val + spec.test <= spec.n, "splits exceed the number of points");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rotation = random_orthogonal(spec.d, &mut rng);
    let src = unit_gaussian_rows(spec.n, spec.d, &mut rng);
    let mut tgt = src.dot(&rotation.t());
    if spec.noise > 0.0 {
        for v in tgt.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise * e;
        }
    }
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    let lex = |ids: &[usize]| Lexicon::new(ids.iter().map(|&i| (i, i)).collect());
    let (train, rest) = order.split_at(spec.train);
    let (val, rest) = rest.split_at(spec.val);
    let test = &rest[..spec.test];
    let names = |p: &str| Vocabulary::new((0..spec.n).map(|i| format!("{p}{i}")).collect()).expect("unique");
    RotationInstance {
        source: EmbeddingMatrix::new(src, names("s")).expect("finite"),
        target: EmbeddingMatrix::new(tgt, names("t")).expect("finite"),
        rotation,
        train: lex(train),
        val: lex(val),
        test: lex(test),
    }
}


/// Three Gaussian blobs per side: pairs of class `c` draw their first input
/// around one centre and their second around another. Centres sit at
/// distance 3 from the origin; `spread` is the per-coordinate deviation.
pub fn blob_pairs(n: usize, d: usize, spread: f64, seed: u64) -> PairDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres1 = unit_gaussian_rows(3, d, &mut rng) * 3.0;
    let centres2 = unit_gaussian_rows(3, d, &mut rng) * 3.0;
    let mut s1 = Array2::zeros((n, d));
    let mut s2 = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        for j in 0..d {
            let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            s1[[i, j]] = centres1[[c, j]] + spread * a;
            s2[[i, j]] = centres2[[c, j]] + spread * b;
        }
        labels.push(TaskLabel::Class(c));
    }
    PairDataset::new(s1, s2, labels).expect("consistent shapes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationSpec {
    pub n: usize,
    pub d: usize,
    /// Number of clusters the first inputs are drawn around.
    pub clusters: usize,
    /// Probability that a pair carries its cluster's majority label.
    pub purity: f64,
    /// Standard deviation of the first inputs around their cluster centre.
    pub spread: f64,
    /// Standard deviation of the noise on related second inputs.
    pub noise: f64,
    pub seed: u64,
}

impl Default for RelationSpec {
    fn default() -> Self {
        RelationSpec {
            n: 400,
            d: 8,
            clusters: 6,
            purity: 0.8,
            spread: 0.3,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Pairs related by a hidden rotation `Q`: entailed second inputs are
/// `Q s1`, contradicting ones `-Q s1`, neutral ones unrelated unit vectors.
/// First inputs cluster, and each cluster mostly carries one label.
pub fn relation_pairs(spec: &RelationSpec) -> PairDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let q = random_orthogonal(spec.d, &mut rng);
    let centres = unit_gaussian_rows(spec.clusters, spec.d, &mut rng);
    let mut s1 = Array2::zeros((spec.n, spec.d));
    let mut s2 = Array2::zeros((spec.n, spec.d));
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = rng.random_range(0..spec.clusters);
        let label = if rng.random::<f64>() < spec.purity { c % 3 } else { rng.random_range(0..3) };
        let mut x = centres.row(c).to_owned();
        for v in x.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += spec.spread * e;
        }
        let y = match label {
            0 => q.dot(&x),
            2 => -q.dot(&x),
            _ => unit_gaussian_rows(1, spec.d, &mut rng).row(0).to_owned() * x.dot(&x).sqrt(),
        };
        s1.row_mut(i).assign(&x);
        for (j, v) in y.iter().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            s2[[i, j]] = v + spec.noise * e;
        }
        labels.push(TaskLabel::Class(label));
    }
    PairDataset::new(s1, s2, labels).expect("consistent shapes")
}
