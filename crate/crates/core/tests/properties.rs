//! Property tests over random shapes and values.

use adanorm_core::data::{generate_synthetic_sensor, split_by_extraneous, SyntheticSensorConfig};
use adanorm_core::gradcheck::{finite_diff_grad, relative_error};
use adanorm_core::normalization::{normalize, StatsSource};
use adanorm_core::{Averaging, ChannelStats, PaddingMode, RunningStats, Statistic, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// Values spaced 0.05 apart in random order, so no two entries of a pooling
/// window come within a finite-difference step of each other.
fn separated_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut next = order.into_iter();
    Tensor::from_fn(shape, |_| 0.05 * (next.next().unwrap() as f64 - n as f64 / 2.0))
}

/// Checks every leaf gradient of `loss(tape, leaves)` against central
/// differences.
fn check_grads(leaves: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[adanorm_core::Var]) -> adanorm_core::Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<_> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let fd = finite_diff_grad(
            |t| {
                let mut tape = Tape::new();
                let vars: Vec<_> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, l)| tape.leaf(if i == j { t.clone() } else { l.clone() }))
                    .collect();
                let out = build(&mut tape, &vars);
                tape.value(out).item()
            },
            leaf,
            1e-5,
        );
        worst = worst.max(relative_error(grads.get(vars[i]).unwrap(), &fd));
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_gradients_match(b in 1usize..3, cin in 1usize..3, cout in 1usize..3, len in 3usize..8,
                            k in prop::sample::select(vec![1usize, 3]), seed in 0u64..1000) {
        let leaves = [tensor(&[b, cin, len], seed), tensor(&[cout, cin, k], seed + 1), tensor(&[cout], seed + 2)];
        let w = tensor(&[b, cout, len], seed + 3);
        let err = check_grads(&leaves, |t, v| {
            let y = t.conv(v[0], v[1], v[2], &[1], &[k / 2], PaddingMode::Zero).unwrap();
            let y = t.relu(y);
            t.weighted_sum(y, w.clone()).unwrap()
        });
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn linear_pool_and_concat_gradients_match(b in 1usize..3, c in 1usize..3, h in 2usize..5, seed in 0u64..1000) {
        let leaves = [separated_tensor(&[b, c, 2 * h, 2 * h], seed), separated_tensor(&[b, 1, 2 * h, 2 * h], seed + 1), tensor(&[3, c + 1], seed + 2), tensor(&[3], seed + 3)];
        let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();
        let err = check_grads(&leaves, |t, v| {
            let x = t.concat_channels(&[v[0], v[1]]).unwrap();
            let x = t.max_pool(x, 2).unwrap();
            let x = t.global_avg_pool(x).unwrap();
            let logits = t.linear(x, v[2], v[3]).unwrap();
            t.softmax_cross_entropy(logits, &labels).unwrap()
        });
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn cross_entropy_ignores_per_sample_logit_shifts(b in 1usize..4, k in 2usize..6, shift in -50.0f64..50.0, seed in 0u64..1000) {
        let logits = tensor(&[b, k], seed);
        let shifted = logits.map(|v| v + shift);
        let labels: Vec<usize> = (0..b).map(|i| i % k).collect();
        let loss = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let l = t.softmax_cross_entropy(v, &labels).unwrap();
            t.value(l).item()
        };
        prop_assert!((loss(&logits) - loss(&shifted)).abs() < 1e-12);
    }

    #[test]
    fn mean_std_output_is_standardized(b in 2usize..5, c in 1usize..4, l in 4usize..20, scale in 0.1f64..10.0, seed in 0u64..1000,
                                       instance in any::<bool>()) {
        let x = tensor(&[b, c, l], seed).map(|v| scale * v + 3.0);
        let averaging = if instance { Averaging::Instance } else { Averaging::Batch };
        let eps = 1e-5;
        let (y, _) = normalize(&x, &vec![1.0; c], &vec![0.0; c], Statistic::MeanStd, eps, StatsSource::Compute(averaging)).unwrap();
        let axes: Vec<usize> = if instance { vec![2] } else { vec![0, 2] };
        let my = adanorm_core::moment_stats(&y, &axes).unwrap();
        let mx = adanorm_core::moment_stats(&x, &axes).unwrap();
        for i in 0..my.mean.len() {
            prop_assert!(my.mean.data()[i].abs() < 1e-6);
            let var_x = mx.var.data()[i];
            let expected = var_x / (var_x + eps);
            prop_assert!((my.var.data()[i] - expected).abs() < 1e-9, "var {} expected {}", my.var.data()[i], expected);
        }
    }

    #[test]
    fn mean_square_output_matches_shrinkage(b in 2usize..5, c in 1usize..4, l in 4usize..20, seed in 0u64..1000) {
        let x = tensor(&[b, c, l], seed);
        let eps = 1e-5;
        let (y, _) = normalize(&x, &vec![1.0; c], &vec![0.0; c], Statistic::MeanSquare, eps, StatsSource::Compute(Averaging::Batch)).unwrap();
        let my = adanorm_core::moment_stats(&y, &[0, 2]).unwrap();
        let mx = adanorm_core::moment_stats(&x, &[0, 2]).unwrap();
        for i in 0..c {
            let nu2 = mx.mean_square.data()[i];
            prop_assert!((my.mean_square.data()[i] - nu2 / (nu2 + eps)).abs() < 1e-6);
        }
    }

    #[test]
    fn unregularized_norm_is_scale_invariant(b in 2usize..4, c in 1usize..3, l in 4usize..12, a in 0.01f64..100.0, seed in 0u64..1000,
                                             mean_square in any::<bool>()) {
        let x = tensor(&[b, c, l], seed);
        let stat = if mean_square { Statistic::MeanSquare } else { Statistic::MeanStd };
        let run = |x: &Tensor<f64>| normalize(x, &vec![1.5; c], &vec![0.2; c], stat, 0.0, StatsSource::Compute(Averaging::Batch)).unwrap().0;
        let (y, ya) = (run(&x), run(&x.map(|v| a * v)));
        let diff = y.data().iter().zip(ya.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-9, "max difference {diff}");
    }

    #[test]
    fn forward_is_pure(b in 1usize..3, c in 1usize..3, seed in 0u64..1000) {
        let x = tensor(&[b, c, 9], seed);
        let w = tensor(&[2, c, 3], seed + 1);
        let run = || {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(Tensor::zeros(&[2])));
            let y = t.conv(xv, wv, bv, &[2], &[1], PaddingMode::Zero).unwrap();
            t.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn subject_split_partitions_samples(subjects in 3usize..7, seed in 0u64..50) {
        let cfg = SyntheticSensorConfig { subjects, classes: 2, channels: 1, steps_per_recording: 64, recordings_per_pair: 1, window: 16, seed, ..Default::default() };
        let ds = generate_synthetic_sensor(&cfg).unwrap();
        let ids: Vec<usize> = (0..subjects).collect();
        let (a, b, c) = split_by_extraneous(&ds, &ids[..subjects - 2], &ids[subjects - 2..subjects - 1], &ids[subjects - 1..]).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), ds.len());
        let mut seen: Vec<_> = a.samples.iter().chain(&b.samples).chain(&c.samples).map(|s| s.data.clone()).collect();
        seen.dedup();
        prop_assert_eq!(seen.len(), ds.len());
    }
}

#[test]
fn running_mean_converges_on_standard_normal_batches() {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let mut running = RunningStats::<f64>::new(1);
    for _ in 0..500 {
        let v: Vec<f64> = (0..256).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mean = v.iter().sum::<f64>() / 256.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 256.0;
        running.update(&ChannelStats { mean: vec![mean], sq: vec![var] }, Statistic::MeanStd, 0.1);
    }
    assert!(running.mean[0].abs() < 0.05, "running mean {}", running.mean[0]);
    assert!((running.sq[0] - 1.0).abs() < 0.1, "running variance {}", running.sq[0]);
    assert_eq!(running.updates_seen, 500);
}
