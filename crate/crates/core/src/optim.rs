//! First-order optimizers shared by the alignment and task trainers.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Rmsprop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    /// Passes over the training pairs (or plain steps for per-point fits).
    pub epochs: usize,
    /// Zero means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Sgd,
            learning_rate: 1e-3,
            epochs: 300,
            batch_size: 0,
            seed: 0,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::Config(format!("rmsprop_decay must be in [0, 1), got {}", self.rmsprop_decay)));
        }
        if !(self.rmsprop_epsilon > 0.0) {
            return Err(Error::Config("rmsprop_epsilon must be > 0".into()));
        }
        Ok(())
    }

    /// Batch size resolved against a dataset of `n` items.
    pub fn effective_batch(&self, n: usize) -> usize {
        if self.batch_size == 0 {
            n.max(1)
        } else {
            self.batch_size.min(n.max(1))
        }
    }
}

/// Update state for a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    cache: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, n_params: usize) -> Self {
        Optimizer {
            cfg: cfg.clone(),
            cache: match cfg.algorithm {
                Algorithm::Sgd => Vec::new(),
                Algorithm::Rmsprop => vec![0.0; n_params],
            },
        }
    }

    /// Applies one descent step in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        let lr = self.cfg.learning_rate;
        match self.cfg.algorithm {
            Algorithm::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Algorithm::Rmsprop => {
                assert_eq!(self.cache.len(), params.len());
                let (rho, eps) = (self.cfg.rmsprop_decay, self.cfg.rmsprop_epsilon);
                for ((p, g), c) in params.iter_mut().zip(grad).zip(self.cache.iter_mut()) {
                    *c = rho * *c + (1.0 - rho) * g * g;
                    *p -= lr * g / (c.sqrt() + eps);
                }
            }
        }
    }
}

/// Splits `0..n` into shuffled mini-batches. Full-batch runs keep the natural
/// order so that reductions are reproducible without a seed.
pub fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if batch_size < n {
        order.shuffle(rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sgd_step() {
        let cfg = OptimizerConfig {
            learning_rate: 0.5,
            ..Default::default()
        };
        let mut opt = Optimizer::new(&cfg, 2);
        let mut p = [1.0, 2.0];
        opt.step(&mut p, &[2.0, -2.0]);
        assert_eq!(p, [0.0, 3.0]);
    }

    #[test]
    fn rmsprop_first_step_is_normalized() {
        let cfg = OptimizerConfig {
            algorithm: Algorithm::Rmsprop,
            learning_rate: 0.01,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-12,
            ..Default::default()
        };
        let mut opt = Optimizer::new(&cfg, 1);
        let mut p = [0.0];
        opt.step(&mut p, &[4.0]);
        // cache = 0.1 * 16, step = 0.01 * 4 / sqrt(1.6)
        let expected = -0.01 * 4.0 / (1.6f64.sqrt() + 1e-12);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        for algorithm in [Algorithm::Sgd, Algorithm::Rmsprop] {
            let cfg = OptimizerConfig {
                algorithm,
                learning_rate: 0.05,
                ..Default::default()
            };
            let mut opt = Optimizer::new(&cfg, 1);
            let mut p = [3.0];
            for _ in 0..2000 {
                let g = [2.0 * (p[0] - 1.0)];
                opt.step(&mut p, &g);
            }
            assert!((p[0] - 1.0).abs() < 0.05, "{algorithm:?}: {}", p[0]);
        }
    }

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = batches(10, 3, &mut rng);
        assert_eq!(b.len(), 4);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batches(5, 5, &mut rng), vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
