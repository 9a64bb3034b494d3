mod common;

use common::{best, brute_csls, brute_knn, kkt_weights, rng};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

use lpalign::align::LinearMap;
use lpalign::embeddings::EmbeddingMatrix;
use lpalign::eval::{RetrievalConfig, RetrievalMethod, Retriever};
use lpalign::lle::{solve_weights_closed, DEFAULT_RIDGE, MAX_GRAM_CONDITION};
use lpalign::neighbors::{build_graph, build_index, knn};
use lpalign::optim::Algorithm;
use lpalign::synthetic::{relation_pairs, RelationSpec};
use lpalign::tasker::{
    build_task_input, ffn_forward, fit_task_model, predict, predict_batch, train_task, Activation, FfnParams,
    OutputHead, PairDataset, TaskConfig, TaskLabel, TaskModel, TrainingSet, Variant, LEAKY_SLOPE,
};

fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), values).unwrap()
}

fn points(max_n: usize, max_d: usize) -> impl Strategy<Value = Array2<f64>> {
    (2..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        proptest::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| matrix(n, d, v))
    })
}

/// Straight loop version of the network: `W x + b`, activation between
/// layers, sigmoid on a one-unit score head.
fn naive_forward(p: &FfnParams, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for (i, l) in p.layers.iter().enumerate() {
        let mut z = vec![0.0; l.weight.nrows()];
        for (r, zr) in z.iter_mut().enumerate() {
            *zr = l.bias[r];
            for (c, hc) in h.iter().enumerate() {
                *zr += l.weight[[r, c]] * hc;
            }
        }
        if i + 1 < p.layers.len() {
            for v in &mut z {
                if *v < 0.0 {
                    *v = match p.activation {
                        Activation::LeakyRelu => LEAKY_SLOPE * *v,
                        Activation::Relu => 0.0,
                    };
                }
            }
        }
        h = z;
    }
    if p.output == OutputHead::Sigmoid1 {
        h[0] = 1.0 / (1.0 + (-h[0]).exp());
    }
    h
}

fn task_cfg(hidden: Vec<usize>, regress: bool) -> TaskConfig {
    let mut cfg = TaskConfig {
        task_hidden: hidden,
        k: 3,
        ..TaskConfig::default()
    };
    if regress {
        cfg.kind = lpalign::tasker::TaskKind::Regress;
    }
    cfg
}

fn random_pairs(n: usize, d: usize, seed: u64) -> PairDataset {
    let mut r = rng(seed);
    let s1 = common::random_matrix(n, d, &mut r);
    let s2 = common::random_matrix(n, d, &mut r);
    PairDataset::new(s1, s2, (0..n).map(|i| TaskLabel::Class(i % 3)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kd_tree_matches_linear_scan(m in points(40, 5), k in 1usize..6) {
        let emb = EmbeddingMatrix::from_array(m.clone()).unwrap();
        let index = build_index(&emb).unwrap();
        let k = k.min(m.nrows() - 1);
        for q in 0..m.nrows() {
            let got = knn(&index, q, k, true).unwrap();
            let want = brute_knn(&m, q, k);
            prop_assert_eq!(got.len(), k);
            for ((gi, gd), (wi, wd)) in got.iter().zip(&want) {
                prop_assert!((gd - wd).abs() <= 1e-12 * (1.0 + wd));
                if gi != wi {
                    let own: f64 = m.row(q).iter().zip(m.row(*gi)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    prop_assert!(*gi != q && (own - wd).abs() <= 1e-12 * (1.0 + wd));
                }
            }
        }
    }

    #[test]
    fn lle_weights_match_kkt_solve(m in points(30, 6), k in 1usize..8, seed in 0u64..1000) {
        let mut r = rng(seed);
        let n = m.nrows();
        let jitter = common::random_matrix(n, m.ncols(), &mut r) * 1e-3;
        let m = m + jitter;
        let k = k.min(n - 1);
        let emb = EmbeddingMatrix::from_array(m.clone()).unwrap();
        let graph = build_graph(&build_index(&emb).unwrap(), k).unwrap();
        let w = solve_weights_closed(&emb, &graph, DEFAULT_RIDGE).unwrap();
        for i in 0..n {
            let row = w.w.row(i);
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
            let nb: Vec<_> = graph.neighbors(i).iter().map(|&j| m.row(j)).collect();
            let (want, _) = kkt_weights(m.row(i), &nb, DEFAULT_RIDGE, MAX_GRAM_CONDITION);
            let recon = |ws: &[f64]| -> f64 {
                (0..m.ncols())
                    .map(|t| {
                        let r: f64 = ws.iter().zip(&nb).map(|(wj, x)| wj * x[t]).sum();
                        (m[[i, t]] - r).powi(2)
                    })
                    .sum()
            };
            let got: Vec<f64> = row.to_vec();
            prop_assert!((recon(&got) - recon(&want)).abs() <= 1e-6 * (1.0 + recon(&want)));
        }
    }

    #[test]
    fn csls_matches_pairwise_scores(src in points(25, 4), seed in 0u64..1000, k in 1usize..6) {
        let (n, d) = src.dim();
        let mut r = rng(seed);
        let tgt = common::random_matrix(n + 3, d, &mut r);
        let s = EmbeddingMatrix::from_array(src.clone()).unwrap();
        let t = EmbeddingMatrix::from_array(tgt.clone()).unwrap();
        prop_assume!(src.outer_iter().all(|row| row.dot(&row) > 1e-6));
        let cfg = RetrievalConfig { method: RetrievalMethod::Csls, csls_k: k };
        let retriever = Retriever::new(&LinearMap::identity(d), &s, &t, &cfg).unwrap();
        let want = brute_csls(src.view(), tgt.view(), k);
        for (q, wq) in want.iter().enumerate() {
            let got = retriever.scores(q).unwrap();
            for (g, w) in got.iter().zip(wq) {
                prop_assert!((g - w).abs() <= 1e-10);
            }
            let top = retriever.rank(q, 1).unwrap()[0];
            prop_assert!(wq[top] >= wq[best(wq)] - 1e-10);
        }
    }

    #[test]
    fn ffn_forward_matches_naive_loop(
        seed in 0u64..10_000,
        d in 1usize..6,
        hidden in proptest::collection::vec(1usize..7, 0..3),
        relu in any::<bool>(),
        regress in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let mut sizes = vec![3 * d];
        sizes.extend(&hidden);
        sizes.push(if regress { 1 } else { 3 });
        let act = if relu { Activation::Relu } else { Activation::LeakyRelu };
        let head = if regress { OutputHead::Sigmoid1 } else { OutputHead::Softmax3 };
        let mut p = FfnParams::xavier(&sizes, act, head, &mut r);
        for l in &mut p.layers {
            l.bias = Array1::from_shape_fn(l.bias.len(), |_| rand::Rng::random_range(&mut r, -0.5..0.5));
        }
        let x = common::random_matrix(1, 3 * d, &mut r).row(0).to_owned();
        let got = ffn_forward(&p, x.view()).unwrap();
        let want = naive_forward(&p, x.as_slice().unwrap());
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-10 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn task_input_is_projection_then_both_sides(seed in 0u64..10_000, d in 1usize..8, h in 0usize..6) {
        let mut r = rng(seed);
        let align = FfnParams::xavier(&[d, if h == 0 { d } else { h }, d], Activation::LeakyRelu, OutputHead::Linear, &mut r);
        let s = common::random_matrix(2, d, &mut r);
        let input = build_task_input(&align, s.row(0), s.row(1)).unwrap();
        prop_assert_eq!(input.len(), 3 * d);
        let proj = naive_forward(&align, s.row(0).as_slice().unwrap());
        let manual: Vec<f64> = proj.iter().chain(s.row(0).iter()).chain(s.row(1).iter()).copied().collect();
        for (a, b) in input.iter().zip(&manual) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn batch_prediction_equals_single(seed in 0u64..1000, d in 1usize..6, regress in any::<bool>()) {
        let cfg = task_cfg(vec![5], regress);
        let model = TaskModel::new(d, &cfg, seed);
        let data = random_pairs(12, d, seed);
        let batch = predict_batch(&model, &data).unwrap();
        for (i, b) in batch.iter().enumerate() {
            prop_assert_eq!(*b, predict(&model, data.side1.row(i), data.side2.row(i)).unwrap());
        }
    }
}

#[test]
fn single_fold_on_full_data_is_the_plain_fit() {
    let data = relation_pairs(&RelationSpec {
        n: 60,
        d: 4,
        seed: 3,
        ..RelationSpec::default()
    });
    let mut cfg = task_cfg(vec![8], false);
    cfg.optimizer.epochs = 5;
    cfg.optimizer.seed = 11;
    let outcome = train_task(&cfg, &data, &data, data.len(), 1, Variant::MseLpl).unwrap();
    let set = TrainingSet::prepare(data.clone(), &cfg).unwrap();
    let (model, _) = fit_task_model(&cfg, &set, Variant::MseLpl, 11).unwrap();
    assert_eq!(outcome.models[0], model);
    let again = train_task(&cfg, &data, &data, data.len(), 1, Variant::MseLpl).unwrap();
    assert_eq!(outcome.report.values, again.report.values);
}

#[test]
fn locality_terms_help_on_scarce_toy_pairs() {
    let all = relation_pairs(&RelationSpec {
        n: 500,
        purity: 0.5,
        seed: 0,
        ..RelationSpec::default()
    });
    let train = all.subset(&(0..300).collect::<Vec<_>>());
    let test = all.subset(&(300..500).collect::<Vec<_>>());
    let mut cfg = task_cfg(vec![64, 64], false);
    cfg.k = 5;
    cfg.optimizer.algorithm = Algorithm::Rmsprop;
    cfg.optimizer.learning_rate = 1e-3;
    cfg.optimizer.epochs = 200;
    cfg.optimizer.seed = 0;
    let baseline = train_task(&cfg, &train, &test, 40, 5, Variant::Baseline).unwrap().report;
    let full = train_task(&cfg, &train, &test, 40, 5, Variant::MseLpl).unwrap().report;
    eprintln!("baseline {:.4}±{:.4}, mse+lpl {:.4}±{:.4}", baseline.mean, baseline.std, full.mean, full.std);
    assert!(full.mean >= baseline.mean);
}
