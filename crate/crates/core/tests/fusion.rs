use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gflow::collectives::Algorithm;
use gflow::fusion::{wait_all, FusionConfig, FusionEngine, PendingWindow, ProgressContext, Theta};
use gflow::launch::with_communicators;
use gflow::pool::GradientPool;
use gflow::scalar::{Element, ElementType};
use gflow::Error;

const KIB: u64 = 1024;

/// Conv/FC weights and biases of the classic eight-layer network, plus
/// batch-norm scale and shift for each conv layer, in layer order.
fn eight_layer_convnet_sizes() -> Vec<usize> {
    let conv = [
        (96 * 3 * 11 * 11, 96),
        (256 * 48 * 5 * 5, 256),
        (384 * 256 * 3 * 3, 384),
        (384 * 192 * 3 * 3, 384),
        (256 * 192 * 3 * 3, 256),
    ];
    let fc = [(4096 * 9216, 4096), (4096 * 4096, 4096), (1000 * 4096, 1000)];
    let mut sizes = Vec::new();
    for (w, b) in conv {
        sizes.extend([w, b, b, b]);
    }
    for (w, b) in fc {
        sizes.extend([w, b]);
    }
    sizes
}

/// Window byte counts for tensors arriving in descending id order: a window
/// closes as soon as its running total reaches `theta`.
fn prefix_sum_windows(sizes: &[usize], elem: u64, theta: Option<u64>) -> Vec<u64> {
    let mut out = Vec::new();
    let mut acc = 0u64;
    for &s in sizes.iter().rev() {
        acc += s as u64 * elem;
        if let Some(t) = theta {
            if acc >= t {
                out.push(acc);
                acc = 0;
            }
        }
    }
    if acc > 0 {
        out.push(acc);
    }
    out
}

fn grads(rank: usize, sizes: &[usize], seed: u64, integer: bool) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + rank as u64);
    sizes
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| {
                    if integer {
                        rng.random_range(-50..50) as f32
                    } else {
                        rng.random_range(-1.0f32..1.0)
                    }
                })
                .collect()
        })
        .collect()
}

struct RankResult {
    pool: Vec<f32>,
    windows: Vec<PendingWindow>,
    grad_bytes: u64,
}

/// One backward pass with fusion on every rank.
fn fused_iteration<T: Element>(
    n: usize,
    sizes: &[usize],
    theta: Theta,
    algo: Algorithm,
    group: usize,
    seed: u64,
    integer: bool,
) -> Vec<RankResult> {
    with_communicators(n, |comm| {
        let comm = comm.with_group_size(group).unwrap().with_purpose("grad");
        let rank = comm.rank();
        let mut pool = GradientPool::<T>::new(sizes, 64).unwrap();
        let progress = ProgressContext::spawn("progress").unwrap();
        let config = FusionConfig {
            threshold: theta,
            overlap_enabled: true,
            precision: T::KIND,
        };
        let mut engine = FusionEngine::new(&pool, comm.clone(), algo, config, progress).unwrap();
        let g = grads(rank, sizes, seed, integer);
        let mut handles = Vec::new();
        for id in (1..=sizes.len()).rev() {
            pool.write_tensor(id, &g[id - 1]).unwrap();
            handles.extend(engine.on_tensor_complete(id).unwrap());
        }
        handles.extend(engine.finalize_iteration().unwrap());
        wait_all(handles).unwrap();
        RankResult {
            pool: pool.to_f32_vec().unwrap(),
            windows: engine.windows().to_vec(),
            grad_bytes: comm.endpoint().stats().snapshot().with_prefix("grad/").payload_bytes_sent,
        }
    })
}

fn reference_pool(n: usize, sizes: &[usize], seed: u64, integer: bool) -> Vec<f64> {
    let layout = gflow::pool::PoolLayout::new(sizes, 64).unwrap();
    let mut out = vec![0.0f64; layout.total_elements()];
    for r in 0..n {
        for (i, g) in grads(r, sizes, seed, integer).iter().enumerate() {
            let d = layout.desc(i + 1).unwrap();
            for (o, v) in out[d.range()].iter_mut().zip(g) {
                *o += *v as f64;
            }
        }
    }
    out
}

fn max_rel(a: &[f32], b: &[f32]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64)).max(1e-30);
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
        / scale
}

fn assert_tiles(windows: &[PendingWindow], total: usize) {
    let mut at = 0;
    for w in windows {
        assert_eq!(w.start_offset, at, "gap or overlap at {at}");
        assert!(w.end_offset > w.start_offset);
        at = w.end_offset;
    }
    assert_eq!(at, total);
}

const SIZES: [usize; 7] = [300, 20, 513, 7, 1024, 64, 10];

#[test]
fn theta_zero_launches_per_tensor() {
    let out = fused_iteration::<f32>(2, &SIZES, Theta::Bytes(0), Algorithm::Ring, 1, 1, false);
    for r in &out {
        assert_eq!(r.windows.len(), SIZES.len());
        let lens: Vec<usize> = r.windows.iter().map(|w| w.len()).collect();
        let mut want = SIZES.to_vec();
        want.reverse();
        assert_eq!(lens, want);
    }
}

#[test]
fn theta_infinite_launches_once_after_backward() {
    let total: usize = SIZES.iter().sum();
    let out = fused_iteration::<f32>(3, &SIZES, Theta::Infinite, Algorithm::Ring, 1, 2, false);
    for r in &out {
        assert_eq!(r.windows.len(), 1);
        assert_eq!((r.windows[0].start_offset, r.windows[0].end_offset), (0, total));
    }
}

#[test]
fn convnet_windows_match_prefix_sum_oracle() {
    let sizes = eight_layer_convnet_sizes();
    assert_eq!(sizes.len(), 26);
    let total: usize = sizes.iter().sum();
    assert!((60_900_000..61_000_000).contains(&total));
    let theta = 64 * KIB * KIB;
    let want = prefix_sum_windows(&sizes, 2, Some(theta));

    let got = with_communicators(1, |comm| {
        let mut pool = GradientPool::<half::f16>::new(&sizes, 32_000).unwrap();
        let config = FusionConfig {
            threshold: Theta::Bytes(theta),
            overlap_enabled: true,
            precision: ElementType::Fp16,
        };
        let progress = ProgressContext::spawn("progress").unwrap();
        let mut engine = FusionEngine::new(&pool, comm, Algorithm::Ring, config, progress).unwrap();
        let mut handles = Vec::new();
        for id in (1..=sizes.len()).rev() {
            let zeros = vec![0.0f32; sizes[id - 1]];
            pool.write_tensor(id, &zeros).unwrap();
            handles.extend(engine.on_tensor_complete(id).unwrap());
        }
        handles.extend(engine.finalize_iteration().unwrap());
        wait_all(handles).unwrap();
        assert_tiles(engine.windows(), total);
        engine.log(0).window_bytes
    });
    assert_eq!(got[0], want);
    assert_eq!(got[0].iter().sum::<u64>(), total as u64 * 2);
}

#[test]
fn finalize_flushes_residual_only_when_nonempty() {
    // 100 f32 per tensor, θ = 800 bytes: windows close after every pair.
    let odd = [100usize; 5];
    let out = fused_iteration::<f32>(2, &odd, Theta::Bytes(800), Algorithm::Ring, 1, 3, true);
    let lens: Vec<usize> = out[0].windows.iter().map(|w| w.len()).collect();
    assert_eq!(lens, vec![200, 200, 100]);

    let even = [100usize; 4];
    let out = fused_iteration::<f32>(2, &even, Theta::Bytes(800), Algorithm::Ring, 1, 3, true);
    assert_eq!(out[0].windows.len(), 2);
    with_communicators(1, |comm| {
        let mut pool = GradientPool::<f32>::new(&even, 64).unwrap();
        let config = FusionConfig {
            threshold: Theta::Bytes(800),
            ..FusionConfig::default()
        };
        let progress = ProgressContext::spawn("progress").unwrap();
        let mut engine = FusionEngine::new(&pool, comm, Algorithm::Ring, config, progress).unwrap();
        let mut handles = Vec::new();
        for id in (1..=4).rev() {
            pool.write_tensor(id, &[1.0; 100]).unwrap();
            handles.extend(engine.on_tensor_complete(id).unwrap());
        }
        assert!(engine.finalize_iteration().unwrap().is_none());
        wait_all(handles).unwrap();
    });
}

#[test]
fn every_threshold_matches_unfused_oracle() {
    let n = 4;
    let total: usize = SIZES.iter().sum();
    let want = reference_pool(n, &SIZES, 11, false);
    let base = fused_iteration::<f32>(n, &SIZES, Theta::Infinite, Algorithm::Ring, 1, 11, false);
    let base_bytes = base[0].grad_bytes;
    let base_pool = base[0].pool.clone();
    for theta in [Theta::Bytes(0), Theta::Bytes(4 * KIB), Theta::Bytes(KIB * KIB), Theta::Infinite] {
        for (algo, group) in [(Algorithm::Ring, 1), (Algorithm::Hierarchical, 2)] {
            let out = fused_iteration::<f32>(n, &SIZES, theta, algo, group, 11, false);
            for r in &out {
                assert_tiles(&r.windows, total);
                let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (g, w) in r.pool.iter().zip(&want) {
                    assert!((*g as f64 - w).abs() <= 1e-6 * scale, "{theta}: {g} vs {w}");
                }
                assert!(max_rel(&r.pool, &base_pool) <= 1e-6);
                assert_eq!(r.pool, out[0].pool);
            }
            if algo == Algorithm::Ring {
                // Each window rounds its segments separately; at most 4 bytes
                // per hop per window of difference.
                let slack = 2 * (n as u64 - 1) * 4 * out[0].windows.len() as u64;
                for r in &out {
                    assert!(r.grad_bytes.abs_diff(base_bytes) <= slack);
                }
            }
        }
    }
}

#[test]
fn integer_gradients_fuse_exactly() {
    let want = reference_pool(3, &SIZES, 5, true);
    for theta in [Theta::Bytes(0), Theta::Bytes(4 * KIB), Theta::Infinite] {
        let out = fused_iteration::<f32>(3, &SIZES, theta, Algorithm::Ring, 1, 5, true);
        for r in &out {
            let got: Vec<f64> = r.pool.iter().map(|v| *v as f64).collect();
            assert_eq!(got, want);
        }
    }
}

#[test]
fn fp16_fusion_halves_payload() {
    let sizes = [256usize, 256];
    let f32_out = fused_iteration::<f32>(2, &sizes, Theta::Infinite, Algorithm::Ring, 1, 4, true);
    let f16_out = fused_iteration::<half::f16>(2, &sizes, Theta::Infinite, Algorithm::Ring, 1, 4, true);
    assert_eq!(f16_out[0].grad_bytes * 2, f32_out[0].grad_bytes);
    assert_eq!(f16_out[0].pool, f32_out[0].pool);
}

#[test]
fn wait_all_with_no_handles_returns() {
    wait_all(Vec::new()).unwrap();
}

#[test]
fn waiting_out_of_launch_order_is_still_correct() {
    let want = reference_pool(2, &SIZES, 8, true);
    let out = with_communicators(2, |comm| {
        let mut pool = GradientPool::<f32>::new(&SIZES, 64).unwrap();
        let config = FusionConfig {
            threshold: Theta::Bytes(0),
            ..FusionConfig::default()
        };
        let progress = ProgressContext::spawn("progress").unwrap();
        let mut engine = FusionEngine::new(&pool, comm.clone(), Algorithm::Ring, config, progress).unwrap();
        let g = grads(comm.rank(), &SIZES, 8, true);
        let mut handles = Vec::new();
        for id in (1..=SIZES.len()).rev() {
            pool.write_tensor(id, &g[id - 1]).unwrap();
            handles.extend(engine.on_tensor_complete(id).unwrap());
        }
        handles.reverse();
        for h in handles {
            h.wait().unwrap();
        }
        pool.to_f32_vec().unwrap()
    });
    for p in out {
        assert_eq!(p.iter().map(|v| *v as f64).collect::<Vec<_>>(), want);
    }
}

#[test]
fn wait_all_surfaces_peer_failure() {
    let out = with_communicators(2, |comm| {
        if comm.rank() == 1 {
            return None;
        }
        let mut pool = GradientPool::<f32>::new(&[16, 16], 64).unwrap();
        let config = FusionConfig {
            threshold: Theta::Bytes(0),
            ..FusionConfig::default()
        };
        let progress = ProgressContext::spawn("progress").unwrap();
        let mut engine = FusionEngine::new(&pool, comm, Algorithm::Ring, config, progress).unwrap();
        let mut handles = Vec::new();
        for id in [2, 1] {
            pool.write_tensor(id, &[1.0; 16]).unwrap();
            handles.extend(engine.on_tensor_complete(id).unwrap());
        }
        Some(wait_all(handles))
    });
    assert!(matches!(out[0], Some(Err(Error::PeerDisconnected { rank: 1 }))));
}

#[test]
fn out_of_order_and_early_finalize_are_errors() {
    with_communicators(1, |comm| {
        let pool = GradientPool::<f32>::new(&[4, 4, 4], 4).unwrap();
        let progress = ProgressContext::spawn("progress").unwrap();
        let mut engine =
            FusionEngine::new(&pool, comm, Algorithm::Ring, FusionConfig::default(), progress).unwrap();
        assert!(matches!(engine.on_tensor_complete(2), Err(Error::Fusion(_))));
        engine.on_tensor_complete(3).unwrap();
        assert!(matches!(engine.finalize_iteration(), Err(Error::Fusion(_))));
        assert!(matches!(engine.on_tensor_complete(3), Err(Error::Fusion(_))));
        assert!(matches!(engine.on_tensor_complete(0), Err(Error::Fusion(_))));
    });
}

#[test]
fn precision_mismatch_rejected() {
    with_communicators(1, |comm| {
        let pool = GradientPool::<f32>::new(&[4], 4).unwrap();
        let config = FusionConfig {
            precision: ElementType::Fp16,
            ..FusionConfig::default()
        };
        let progress = ProgressContext::spawn("progress").unwrap();
        assert!(FusionEngine::new(&pool, comm, Algorithm::Ring, config, progress).is_err());
    });
}

#[test]
fn windows_only_cover_completed_tensors() {
    // Writes into a region held by an in-flight collective would fail with
    // RegionBusy, so every successful write proves the window excluded it.
    let sizes = [2000usize, 1, 3000, 17, 4000, 5, 1000];
    for iter in 0..20u64 {
        with_communicators(3, |comm| {
            let mut pool = GradientPool::<f32>::new(&sizes, 64).unwrap();
            let config = FusionConfig {
                threshold: Theta::Bytes(iter * 512),
                ..FusionConfig::default()
            };
            let progress = ProgressContext::spawn("progress").unwrap();
            let mut engine =
                FusionEngine::new(&pool, comm.clone(), Algorithm::Ring, config, progress).unwrap();
            let g = grads(comm.rank(), &sizes, iter, false);
            let mut handles = Vec::new();
            let mut written_end = 0;
            for id in (1..=sizes.len()).rev() {
                pool.write_tensor(id, &g[id - 1]).unwrap();
                written_end += sizes[id - 1];
                for h in engine.on_tensor_complete(id).unwrap() {
                    assert!(h.window().end_offset <= written_end);
                    handles.push(h);
                }
            }
            handles.extend(engine.finalize_iteration().unwrap());
            wait_all(handles).unwrap();
        });
    }
}

#[test]
fn engine_reuses_across_iterations() {
    let out = with_communicators(2, |comm| {
        let mut pool = GradientPool::<f32>::new(&SIZES, 64).unwrap();
        let config = FusionConfig {
            threshold: Theta::Bytes(4 * KIB),
            ..FusionConfig::default()
        };
        let progress = ProgressContext::spawn("progress").unwrap();
        let mut engine = FusionEngine::new(&pool, comm.clone(), Algorithm::Ring, config, progress).unwrap();
        let mut pools = Vec::new();
        for it in 0..3u64 {
            pool.begin_iteration();
            engine.begin_iteration();
            let g = grads(comm.rank(), &SIZES, 20 + it, true);
            let mut handles = Vec::new();
            for id in (1..=SIZES.len()).rev() {
                pool.write_tensor(id, &g[id - 1]).unwrap();
                handles.extend(engine.on_tensor_complete(id).unwrap());
            }
            handles.extend(engine.finalize_iteration().unwrap());
            wait_all(handles).unwrap();
            assert_tiles(engine.windows(), SIZES.iter().sum());
            pools.push(pool.to_f32_vec().unwrap());
        }
        pools
    });
    for it in 0..3u64 {
        let want = reference_pool(2, &SIZES, 20 + it, true);
        let got: Vec<f64> = out[0][it as usize].iter().map(|v| *v as f64).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn synchronous_mode_matches_overlapped() {
    let want = reference_pool(2, &SIZES, 9, true);
    let out = with_communicators(2, |comm| {
        let mut pool = GradientPool::<f32>::new(&SIZES, 64).unwrap();
        let config = FusionConfig {
            threshold: Theta::Bytes(KIB),
            overlap_enabled: false,
            precision: ElementType::Fp32,
        };
        let progress = ProgressContext::spawn("progress").unwrap();
        let mut engine = FusionEngine::new(&pool, comm.clone(), Algorithm::Ring, config, progress).unwrap();
        let g = grads(comm.rank(), &SIZES, 9, true);
        let mut handles = Vec::new();
        for id in (1..=SIZES.len()).rev() {
            pool.write_tensor(id, &g[id - 1]).unwrap();
            handles.extend(engine.on_tensor_complete(id).unwrap());
        }
        handles.extend(engine.finalize_iteration().unwrap());
        wait_all(handles).unwrap();
        pool.to_f32_vec().unwrap()
    });
    for p in out {
        assert_eq!(p.iter().map(|v| *v as f64).collect::<Vec<_>>(), want);
    }
}

use proptest::strategy::Strategy;

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
    #[test]
    fn windows_tile_the_pool_for_any_threshold(
        sizes in proptest::collection::vec(1usize..400, 1..10),
        theta in proptest::prop_oneof![
            (0u64..4096).prop_map(Theta::Bytes),
            proptest::strategy::Just(Theta::Infinite),
        ],
    ) {
        let total: usize = sizes.iter().sum();
        let out = fused_iteration::<f32>(2, &sizes, theta, Algorithm::Ring, 1, 21, true);
        let want = reference_pool(2, &sizes, 21, true);
        for r in &out {
            assert_tiles(&r.windows, total);
            let got: Vec<f64> = r.pool.iter().map(|v| *v as f64).collect();
            proptest::prop_assert_eq!(got, want.clone());
        }
    }
}
