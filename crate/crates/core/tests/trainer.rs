use std::collections::BTreeSet;

use gflow::collectives::{digest_f32, Algorithm};
use gflow::fusion::Theta;
use gflow::launch::with_communicators;
use gflow::scalar::ElementType;
use gflow::trainer::{synth_data, train, train_observed, Batch, CscConfig, Mlp, Task, TrainConfig};
use gflow::Error;

fn small_config() -> TrainConfig {
    TrainConfig {
        layers: vec![8, 16, 8, 1],
        examples: 256,
        batch: 8,
        iters: 30,
        lr: 0.02,
        momentum: 0.9,
        chunk_size: 16,
        theta: Theta::Bytes(256),
        ..TrainConfig::default()
    }
}

fn rel_inf(a: &[f32], b: &[f32]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Independent f64 forward pass over flat parameters in pool layout.
fn loss_f64(model: &Mlp, params: &[f64], batch: &Batch) -> f64 {
    let layout = model.layout(7).unwrap();
    let dims = model.dims();
    let layers = dims.len() - 1;
    let rows = batch.rows();
    let mut total = 0.0;
    for r in 0..rows {
        let mut a: Vec<f64> = batch.x[r * dims[0]..(r + 1) * dims[0]].iter().map(|&v| v as f64).collect();
        for l in 1..=layers {
            let w = &params[layout.desc(2 * l - 1).unwrap().range()];
            let b = &params[layout.desc(2 * l).unwrap().range()];
            a = (0..dims[l])
                .map(|o| {
                    let z = b[o] + (0..dims[l - 1]).map(|i| w[o * dims[l - 1] + i] * a[i]).sum::<f64>();
                    if l < layers {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
        }
        let (z, y) = (a[0], batch.y[r] as f64);
        total += match model.task() {
            Task::Linear => (z - y).powi(2),
            Task::Logistic => (1.0 + z.exp()).ln() - y * z,
        };
    }
    total / rows as f64
}

fn gradients(model: &Mlp, params: &[f32], batch: &Batch) -> (f32, Vec<f32>) {
    let layout = model.layout(7).unwrap();
    let mut flat = vec![f32::NAN; layout.total_elements()];
    let loss = model
        .forward_backward(&layout, params, batch, |id, g| {
            flat[layout.desc(id).unwrap().range()].copy_from_slice(g);
            Ok(())
        })
        .unwrap();
    (loss, flat)
}

#[test]
fn synthetic_data_is_reproducible_and_sharded() {
    let a = synth_data(5, 64, 3, Task::Logistic, 2).unwrap();
    let b = synth_data(5, 64, 3, Task::Logistic, 2).unwrap();
    assert_eq!(a.all(), b.all());
    assert_ne!(a.all(), synth_data(6, 64, 3, Task::Logistic, 2).unwrap().all());
    let s0: BTreeSet<usize> = a.shard(0).into_iter().collect();
    let s1: BTreeSet<usize> = a.shard(1).into_iter().collect();
    assert!(s0.is_disjoint(&s1));
    assert_eq!(s0.union(&s1).copied().collect::<Vec<_>>(), (0..64).collect::<Vec<_>>());
    assert!(a.all().y.iter().all(|&y| y == 0.0 || y == 1.0));
    assert!(matches!(synth_data(5, 63, 3, Task::Linear, 2), Err(Error::Config(_))));
}

#[test]
fn bayes_accuracy_matches_generator_sampling() {
    let data = synth_data(3, 4, 10, Task::Logistic, 1).unwrap();
    let truth = data.truth();
    // Monte Carlo over the generator's own input distribution.
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let samples = 200_000;
    let mut acc = 0.0;
    for _ in 0..samples {
        let z = truth.bias + truth.weights.iter().map(|w| w * normal.sample(&mut rng)).sum::<f64>();
        let p = 1.0 / (1.0 + (-z).exp());
        acc += p.max(1.0 - p);
    }
    let mc = acc / samples as f64;
    assert!((truth.bayes_accuracy() - mc).abs() < 3e-3, "{} vs {mc}", truth.bayes_accuracy());
}

#[test]
fn linear_gradient_matches_closed_form() {
    let model = Mlp::new(&[2, 1], Task::Linear).unwrap();
    let layout = model.layout(7).unwrap();
    // Pool order: bias (id 2) at 0, weights (id 1) at 1..3.
    let params = [0.5f32, 1.0, -2.0];
    let batch = Batch {
        x: vec![1.0, 2.0, 3.0, -1.0],
        y: vec![0.0, 4.0],
    };
    let (loss, g) = gradients(&model, &params, &batch);
    // z = [1 - 4 + 0.5, 3 + 2 + 0.5] = [-2.5, 5.5]; residual r = [-2.5, 1.5].
    let r = [-2.5f32, 1.5];
    assert_eq!(loss, (r[0] * r[0] + r[1] * r[1]) / 2.0);
    let gw = [
        2.0 * (1.0 * r[0] + 3.0 * r[1]) / 2.0,
        2.0 * (2.0 * r[0] - 1.0 * r[1]) / 2.0,
    ];
    assert_eq!(&g[layout.desc(1).unwrap().range()], &gw);
    assert_eq!(g[layout.desc(2).unwrap().range()][0], 2.0 * (r[0] + r[1]) / 2.0);
}

#[test]
fn zero_everything_gives_zero_gradients() {
    let model = Mlp::new(&[3, 4, 1], Task::Linear).unwrap();
    let params = vec![0.0f32; model.num_params()];
    let batch = Batch {
        x: vec![0.0; 6],
        y: vec![0.0; 2],
    };
    let (loss, g) = gradients(&model, &params, &batch);
    assert_eq!(loss, 0.0);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn gradients_match_finite_differences() {
    for task in [Task::Linear, Task::Logistic] {
        let model = Mlp::new(&[4, 6, 5, 1], task).unwrap();
        let layout = model.layout(7).unwrap();
        let params = model.init(&layout, 11);
        let data = synth_data(2, 16, 4, task, 1).unwrap();
        let batch = data.batch(0, 0, 16);
        let (loss, g) = gradients(&model, &params, &batch);
        let p64: Vec<f64> = params.iter().map(|&v| v as f64).collect();
        assert!((loss as f64 - loss_f64(&model, &p64, &batch)).abs() < 1e-5);
        let h = 1e-6;
        let fd: Vec<f64> = (0..p64.len())
            .map(|i| {
                let mut up = p64.clone();
                let mut dn = p64.clone();
                up[i] += h;
                dn[i] -= h;
                (loss_f64(&model, &up, &batch) - loss_f64(&model, &dn, &batch)) / (2.0 * h)
            })
            .collect();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
            assert!(
                (*a as f64 - b).abs() <= 1e-4 * scale,
                "{task} element {i}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn full_batch_linear_regression_descends_monotonically() {
    let cfg = TrainConfig {
        layers: vec![6, 1],
        examples: 128,
        batch: 128,
        iters: 100,
        lr: 0.005,
        momentum: 0.0,
        chunk_size: 2,
        ..TrainConfig::default()
    };
    let report = with_communicators(1, |comm| train(&cfg, &comm).unwrap()).remove(0);
    let losses: Vec<f32> = report.metrics.iter().map(|m| m.loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{} then {}", w[0], w[1]);
    }
}

#[test]
fn four_ranks_match_one_rank_with_four_times_the_batch() {
    let base = small_config();
    let trajectory = |n: usize, batch: usize| {
        let cfg = TrainConfig { batch, ..base.clone() };
        with_communicators(n, |comm| {
            let mut traj = Vec::new();
            train_observed(&cfg, &comm, |_, w| traj.push(w.to_vec())).unwrap();
            traj
        })
        .remove(0)
    };
    let wide = trajectory(4, 8);
    let single = trajectory(1, 32);
    for (t, (a, b)) in wide.iter().zip(&single).enumerate() {
        let e = rel_inf(a, b);
        assert!(e <= 1e-6, "iteration {t}: {e}");
    }
}

#[test]
fn replicas_agree_and_runs_are_deterministic() {
    let cfg = TrainConfig {
        algorithm: Algorithm::Hierarchical,
        group_size: 2,
        ..small_config()
    };
    let run = || {
        with_communicators(4, |comm| {
            let mut digests = Vec::new();
            let r = train_observed(&cfg, &comm, |_, w| digests.push(digest_f32(w))).unwrap();
            let rows: Vec<String> = r
                .metrics
                .iter()
                .map(|m| {
                    format!(
                        "{},{},{},{},{},{}",
                        m.iteration, m.loss, m.sparsity, m.grad_payload_bytes, m.norm_bytes, m.collectives_launched
                    )
                })
                .collect();
            (digests, rows)
        })
    };
    let first = run();
    for r in &first {
        assert_eq!(r.0, first[0].0);
    }
    assert_eq!(first, run());
}

#[test]
fn csc_without_sparsity_follows_dense_trajectory() {
    let dense_cfg = small_config();
    let csc_cfg = TrainConfig {
        csc: Some(CscConfig {
            final_sparsity: 0.0,
            warmup_iters: 0,
        }),
        ..small_config()
    };
    let traj = |cfg: &TrainConfig| {
        with_communicators(4, |comm| {
            let mut traj = Vec::new();
            train_observed(cfg, &comm, |_, w| traj.push(w.to_vec())).unwrap();
            traj
        })
        .remove(0)
    };
    let dense = traj(&dense_cfg);
    let csc = traj(&csc_cfg);
    for (a, b) in csc.iter().zip(&dense) {
        assert!(rel_inf(a, b) <= 1e-6);
    }
}

#[test]
fn csc_reports_selection_per_iteration() {
    let cfg = TrainConfig {
        csc: Some(CscConfig {
            final_sparsity: 0.75,
            warmup_iters: 4,
        }),
        iters: 8,
        ..small_config()
    };
    let reports = with_communicators(2, |comm| train(&cfg, &comm).unwrap());
    let r = &reports[0];
    let chunks = r.num_chunks;
    assert_eq!(r.sparse_log[0].k, chunks);
    let expect: Vec<f64> = (0..8).map(|t| 0.75 * (t as f64 / 4.0).min(1.0)).collect();
    for (log, s) in r.sparse_log.iter().zip(&expect) {
        assert!((log.sparsity - s).abs() < 1e-12);
        assert!(log.norm_bytes > 0);
    }
    let k_final = ((0.25 * chunks as f64).round() as usize).max(1);
    assert_eq!(r.sparse_log[7].k, k_final);
    assert!(r.metrics[7].grad_payload_bytes < r.metrics[0].grad_payload_bytes);
    assert_eq!(reports[0].weights, reports[1].weights);
}

#[test]
fn fp16_gradients_train() {
    let cfg = TrainConfig {
        precision: ElementType::Fp16,
        ..small_config()
    };
    let reports = with_communicators(2, |comm| train(&cfg, &comm).unwrap());
    let fp32 = with_communicators(2, |comm| train(&small_config(), &comm).unwrap());
    let m = &reports[0].metrics;
    assert!(m.iter().all(|x| x.loss.is_finite()));
    assert_eq!(m[0].grad_payload_bytes * 2, fp32[0].metrics[0].grad_payload_bytes);
    assert!(m.last().unwrap().loss < m[0].loss);
}

#[test]
fn diverging_replicas_abort_the_run() {
    let out = with_communicators(2, |comm| {
        let cfg = TrainConfig {
            seed: comm.rank() as u64,
            ..small_config()
        };
        train(&cfg, &comm).map(|_| ())
    });
    assert!(out.iter().all(|r| matches!(r, Err(Error::Protocol(_)))));
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        TrainConfig { examples: 255, ..small_config() },
        TrainConfig { lr: 0.0, ..small_config() },
        TrainConfig { group_size: 3, ..small_config() },
        TrainConfig { layers: vec![8, 2], ..small_config() },
    ];
    for cfg in bad {
        let out = with_communicators(2, |comm| train(&cfg, &comm).map(|_| ()));
        assert!(out.iter().all(|r| matches!(r, Err(Error::Config(_)))), "{cfg:?}");
    }
}
