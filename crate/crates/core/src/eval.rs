//! Retrieval and evaluation metrics.
//!
//! Translation retrieval ranks target rows by cosine similarity to a mapped
//! source row, or by CSLS:
//!
//! ```text
//! csls(x, y) = 2 cos(x, y) - r_T(x) - r_S(y)
//! ```
//!
//! where `r_T(x)` is the mean cosine of `x` to its `csls_k` nearest targets
//! and `r_S(y)` the mean cosine of `y` to its `csls_k` nearest mapped sources.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{apply_map, LinearMap};
use crate::embeddings::{EmbeddingMatrix, Lexicon};
use crate::error::{Error, Result};

/// Anything that maps source rows into the target space.
pub trait Projector {
    fn project(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

impl Projector for LinearMap {
    fn project(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        apply_map(self, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMethod {
    #[serde(alias = "nn")]
    NnCosine,
    #[default]
    Csls,
}

impl RetrievalMethod {
    pub fn name(self) -> &'static str {
        match self {
            RetrievalMethod::NnCosine => "nn",
            RetrievalMethod::Csls => "csls",
        }
    }
}

impl FromStr for RetrievalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" | "nn_cosine" => Ok(RetrievalMethod::NnCosine),
            "csls" => Ok(RetrievalMethod::Csls),
            other => Err(Error::Config(format!("unknown retrieval method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub method: RetrievalMethod,
    pub csls_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            method: RetrievalMethod::Csls,
            csls_k: 10,
        }
    }
}

impl RetrievalConfig {
    pub fn nn() -> Self {
        RetrievalConfig {
            method: RetrievalMethod::NnCosine,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.csls_k == 0 {
            return Err(Error::Config("csls_k must be >= 1".into()));
        }
        Ok(())
    }
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn cosine(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} dims", x.len(), y.len())));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 {
        return Err(Error::ZeroNorm { row: 0 });
    }
    if ny == 0.0 {
        return Err(Error::ZeroNorm { row: 1 });
    }
    Ok(x.dot(&y) / (nx * ny))
}

/// `2 cos(x, y) - r_t - r_s`.
pub fn csls_score(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>, r_t: f64, r_s: f64) -> Result<f64> {
    Ok(2.0 * cosine(x, y)? - r_t - r_s)
}

fn unit_rows(m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = norm(row.view());
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm { row: i });
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// Indices of the `k` largest scores, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

fn mean_top(sims: impl Iterator<Item = f64>, k: usize) -> f64 {
    let mut v: Vec<f64> = sims.collect();
    let k = k.min(v.len());
    if k == 0 {
        return 0.0;
    }
    if k < v.len() {
        v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    v[..k].iter().sum::<f64>() / k as f64
}

/// Precomputed retrieval state for one mapped source and one target space.
#[derive(Debug, Clone)]
pub struct Retriever {
    method: RetrievalMethod,
    csls_k: usize,
    projected: Array2<f64>,
    target: Array2<f64>,
    /// Mean similarity of each target to its nearest mapped sources.
    r_s: Vec<f64>,
}

impl Retriever {
    pub fn new<P: Projector + ?Sized>(
        f: &P,
        src: &EmbeddingMatrix,
        tgt: &EmbeddingMatrix,
        cfg: &RetrievalConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let projected = unit_rows(f.project(src.data().view())?.view())?;
        let target = unit_rows(tgt.data().view())?;
        if projected.ncols() != target.ncols() {
            return Err(Error::Shape(format!(
                "projected sources are {}-d, targets are {}-d",
                projected.ncols(),
                target.ncols()
            )));
        }
        let r_s = match cfg.method {
            RetrievalMethod::NnCosine => Vec::new(),
            RetrievalMethod::Csls => (0..target.nrows())
                .into_par_iter()
                .map(|t| {
                    let y = target.row(t);
                    mean_top(projected.outer_iter().map(|x| x.dot(&y)), cfg.csls_k)
                })
                .collect(),
        };
        Ok(Retriever {
            method: cfg.method,
            csls_k: cfg.csls_k,
            projected,
            target,
            r_s,
        })
    }

    pub fn n_targets(&self) -> usize {
        self.target.nrows()
    }

    /// Scores of every target for one source row.
    pub fn scores(&self, query_id: usize) -> Result<Vec<f64>> {
        if query_id >= self.projected.nrows() {
            return Err(Error::IndexOutOfBounds {
                index: query_id,
                len: self.projected.nrows(),
            });
        }
        let x = self.projected.row(query_id);
        let cos: Vec<f64> = self.target.outer_iter().map(|y| x.dot(&y)).collect();
        Ok(match self.method {
            RetrievalMethod::NnCosine => cos,
            RetrievalMethod::Csls => {
                let r_t = mean_top(cos.iter().copied(), self.csls_k);
                cos.iter().zip(&self.r_s).map(|(c, r_s)| 2.0 * c - r_t - r_s).collect()
            }
        })
    }

    pub fn rank(&self, query_id: usize, topk: usize) -> Result<Vec<usize>> {
        Ok(top_k(&self.scores(query_id)?, topk))
    }
}

/// Ranked target indices for one source row.
pub fn retrieve<P: Projector + ?Sized>(
    f: &P,
    query_id: usize,
    src: &EmbeddingMatrix,
    tgt: &EmbeddingMatrix,
    cfg: &RetrievalConfig,
    topk: usize,
) -> Result<Vec<usize>> {
    Retriever::new(f, src, tgt, cfg)?.rank(query_id, topk)
}

/// Fraction of test sources with a gold target among the top `k`
/// retrieved. Sources listed with several gold targets count once and are
/// correct when any of them is retrieved.
pub fn precision_at_k<P: Projector + ?Sized>(
    f: &P,
    src: &EmbeddingMatrix,
    tgt: &EmbeddingMatrix,
    lex_test: &Lexicon,
    cfg: &RetrievalConfig,
    k: usize,
) -> Result<f64> {
    let retriever = Retriever::new(f, src, tgt, cfg)?;
    precision_with(&retriever, lex_test, k)
}

pub fn precision_with(retriever: &Retriever, lex_test: &Lexicon, k: usize) -> Result<f64> {
    if lex_test.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    let mut gold: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(s, t) in &lex_test.pairs {
        if t >= retriever.n_targets() {
            return Err(Error::IndexOutOfBounds {
                index: t,
                len: retriever.n_targets(),
            });
        }
        gold.entry(s).or_default().push(t);
    }
    let queries: Vec<(&usize, &Vec<usize>)> = gold.iter().collect();
    let hits = queries
        .par_iter()
        .map(|(&s, golds)| Ok(retriever.rank(s, k)?.iter().any(|t| golds.contains(t))))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() || pred.len() < 2 {
        return Err(Error::Shape(format!(
            "pearson needs two equal-length series of at least 2 values, got {} and {}",
            pred.len(),
            gold.len()
        )));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gold.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gold) {
        cov += (p - mp) * (g - mg);
        vp += (p - mp) * (p - mp);
        vg += (g - mg) * (g - mg);
    }
    if vp == 0.0 {
        return Err(Error::ZeroVariance("predictions"));
    }
    if vg == 0.0 {
        return Err(Error::ZeroVariance("gold values"));
    }
    Ok((cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0))
}

pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64> {
    if pred.len() != gold.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "accuracy needs two equal-length non-empty label lists, got {} and {}",
            pred.len(),
            gold.len()
        )));
    }
    Ok(pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64)
}

/// Per-run metric values with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub method: String,
    pub metric: String,
    pub train_size: Option<usize>,
    pub k: Option<usize>,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub fingerprint: Option<String>,
}

impl MetricsReport {
    /// Summary of one or more runs; a single run has zero spread.
    pub fn from_runs(values: &[f64], seeds: &[u64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::TooFewRuns(0));
        }
        if seeds.len() != values.len() {
            return Err(Error::Shape(format!("{} values but {} seeds", values.len(), seeds.len())));
        }
        // Welford
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &v) in values.iter().enumerate() {
            let delta = v - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (v - mean);
        }
        Ok(MetricsReport {
            task: String::new(),
            method: String::new(),
            metric: String::new(),
            train_size: None,
            k: None,
            seeds: seeds.to_vec(),
            values: values.to_vec(),
            mean,
            std: (m2 / values.len() as f64).max(0.0).sqrt(),
            fingerprint: None,
        })
    }

    pub fn labeled(mut self, task: &str, method: &str, metric: &str) -> Self {
        self.task = task.to_owned();
        self.method = method.to_owned();
        self.metric = metric.to_owned();
        self
    }
}

/// Mean and population standard deviation over at least two runs.
pub fn variance_report(values: &[f64], seeds: &[u64]) -> Result<MetricsReport> {
    if values.len() < 2 {
        return Err(Error::TooFewRuns(values.len()));
    }
    MetricsReport::from_runs(values, seeds)
}

/// One CSV row per report, per-run values joined with `;`.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("task,method,metric,train_size,k,mean,std,seeds,values,fingerprint\n");
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let values: Vec<String> = r.values.iter().map(f64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.task,
            r.method,
            r.metric,
            opt(r.train_size),
            opt(r.k),
            r.mean,
            r.std,
            seeds.join(";"),
            values.join(";"),
            r.fingerprint.as_deref().unwrap_or_default()
        );
    }
    out
}
