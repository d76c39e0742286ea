//! Property-based invariants over the tensor primitives, normalization,
//! metrics, and the burst-removal law.

use cdsa_core::data::{burst_mask, denormalize, metrics, normalize, synth_gen, DataCube, MissingSpec, SynthKind};
use cdsa_core::tensor::{
    flat_index, kron3, mode_apply, reshape_for_dim, reshape_from_dim, scaled_scores, softmax_rows,
    unflat_index, Dim, Shape3, Tensor,
};
use proptest::prelude::*;

fn small_shape() -> impl Strategy<Value = Shape3> {
    (1usize..=4, 1usize..=4, 1usize..=4).prop_map(|(t, l, m)| Shape3::new(t, l, m).unwrap())
}

fn stochastic_map(n: usize, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let scores = Tensor::from_fn(&[n, n], |_| rng.random_range(-2.0..2.0));
    softmax_rows(&scores).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flat_index_round_trips(s in small_shape(), t in 0usize..4, l in 0usize..4, m in 0usize..4) {
        let (t, l, m) = (t % s.t, l % s.l, m % s.m);
        let p = flat_index(t, l, m, s).unwrap();
        prop_assert!(p < s.cells());
        prop_assert_eq!(unflat_index(p, s).unwrap(), (t, l, m));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scores = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-30.0..30.0));
        let y = softmax_rows(&scores).unwrap();
        for i in 0..rows {
            let sum: f64 = y.data()[i * cols..(i + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", i, sum);
        }
        for &v in y.data() {
            prop_assert!(v > 0.0 && v < 1.0 + 1e-12);
        }
        let shifted = softmax_rows(&scores.map(|v| v + shift)).unwrap();
        prop_assert!(y.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn sequential_mode_apply_equals_joint_kron(s in small_shape(), seed in any::<u64>(), width in 1usize..3) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = Tensor::from_fn(&[s.t, s.l, s.m, width], |_| rng.random_range(-1.0..1.0));
        let a_t = stochastic_map(s.t, seed ^ 1);
        let a_l = stochastic_map(s.l, seed ^ 2);
        let a_m = stochastic_map(s.m, seed ^ 3);

        let joint = kron3(&a_t, &a_l, &a_m).unwrap();
        let want = joint.matmul(&v.reshaped(&[s.cells(), width]).unwrap()).unwrap();

        let orders: [[Dim; 3]; 6] = [
            [Dim::Time, Dim::Location, Dim::Measurement],
            [Dim::Time, Dim::Measurement, Dim::Location],
            [Dim::Location, Dim::Time, Dim::Measurement],
            [Dim::Location, Dim::Measurement, Dim::Time],
            [Dim::Measurement, Dim::Time, Dim::Location],
            [Dim::Measurement, Dim::Location, Dim::Time],
        ];
        let map_for = |d: Dim| match d {
            Dim::Time => &a_t,
            Dim::Location => &a_l,
            Dim::Measurement => &a_m,
        };
        let mut outputs = Vec::new();
        for order in orders {
            let mut cur = v.clone();
            for d in order {
                cur = mode_apply(map_for(d), &cur, d).unwrap();
            }
            let got = cur.reshaped(&[s.cells(), width]).unwrap();
            prop_assert!(got.max_abs_diff(&want) < 1e-12);
            outputs.push(got);
        }
        for o in &outputs[1..] {
            prop_assert!(o.max_abs_diff(&outputs[0]) < 1e-12);
        }
    }

    #[test]
    fn reshape_round_trips(s in small_shape(), width in 1usize..4, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[s.t, s.l, s.m, width], |_| rng.random_range(-5.0..5.0));
        for dim in Dim::ALL {
            let rows = reshape_for_dim(&x, dim).unwrap();
            let back = reshape_from_dim(&rows, dim, s, width).unwrap();
            prop_assert_eq!(&back, &x);
        }
    }

    #[test]
    fn scaled_scores_scale_matches_width(n in 1usize..4, d in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
        let s = scaled_scores(&q, &k).unwrap();
        let raw = q.matmul(&k.transpose().unwrap()).unwrap();
        prop_assert!(s.max_abs_diff(&raw.scale(1.0 / (d as f64).sqrt())) < 1e-14);
    }

    #[test]
    fn normalization_round_trips_observed(seed in any::<u64>(), t in 2usize..8, l in 1usize..3, m in 1usize..3) {
        let cube = synth_gen(SynthKind::Seasonal, Shape3::new(t, l, m).unwrap(), seed, 0.3).unwrap();
        let n = normalize(&cube).unwrap();
        // Unobserved cells are exactly zero once normalized.
        for (i, &obs) in n.observed.iter().enumerate() {
            if !obs {
                prop_assert_eq!(n.values.data()[i], 0.0);
            }
        }
        let back = denormalize(&n).unwrap();
        for i in 0..cube.shape.cells() {
            if cube.observed[i] {
                prop_assert!((back.values.data()[i] - cube.values.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn metrics_identities(seed in any::<u64>(), n in 2usize..20) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let truth = Tensor::from_fn(&[n, 1, 1], |_| rng.random_range(-10.0..10.0));
        let pred = Tensor::from_fn(&[n, 1, 1], |_| rng.random_range(-10.0..10.0));
        let mask: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
        if mask.iter().any(|&b| b) {
            let rep = metrics(&pred, &truth, &mask).unwrap();
            prop_assert!((rep.rmse * rep.rmse - rep.mse).abs() <= 1e-12 * rep.mse.max(1.0));
            prop_assert!(rep.mae <= rep.rmse + 1e-12);
            prop_assert!(rep.rmse >= 0.0 && rep.mae >= 0.0 && rep.mre >= 0.0);
        }
    }

    #[test]
    fn burst_mask_is_deterministic(seed in any::<u64>()) {
        let cube = synth_gen(SynthKind::Seasonal, Shape3::new(50, 2, 1).unwrap(), seed, 0.0).unwrap();
        let spec = MissingSpec { target_rate: 0.3, burst_len_mean: 3.0, seed };
        let a = burst_mask(&cube, &spec).unwrap();
        let b = burst_mask(&cube, &spec).unwrap();
        prop_assert_eq!(a, b);
    }
}

/// Kolmogorov-Smirnov sanity check: at a low removal rate the maximal
/// removal runs follow the configured geometric law closely (bursts rarely
/// collide, so run lengths are essentially the raw burst draws).
#[test]
fn burst_run_lengths_follow_geometric_law() {
    let t = 2_000_000;
    let shape = Shape3::new(t, 1, 1).unwrap();
    let cube = DataCube::dense(shape, Tensor::zeros(&[t, 1, 1])).unwrap();
    let mean = 4.0;
    let spec = MissingSpec {
        target_rate: 0.02,
        burst_len_mean: mean,
        seed: 1234,
    };
    let mask = burst_mask(&cube, &spec).unwrap();

    let mut runs: Vec<usize> = Vec::new();
    let mut cur = 0usize;
    for &r in &mask.removed {
        if r {
            cur += 1;
        } else if cur > 0 {
            runs.push(cur);
            cur = 0;
        }
    }
    if cur > 0 {
        runs.push(cur);
    }
    assert!(runs.len() >= 8_000, "only {} runs sampled", runs.len());

    // Empirical CDF against Geometric(p = 1/mean) on {1, 2, ...}.
    let p = 1.0 / mean;
    let n = runs.len() as f64;
    let max_run = *runs.iter().max().unwrap();
    let mut counts = vec![0usize; max_run + 1];
    for &r in &runs {
        counts[r] += 1;
    }
    let mut cum = 0.0;
    let mut ks: f64 = 0.0;
    for (k, &count) in counts.iter().enumerate().skip(1) {
        cum += count as f64 / n;
        let model_cdf = 1.0 - (1.0 - p).powi(k as i32);
        ks = ks.max((cum - model_cdf).abs());
    }
    assert!(ks < 0.05, "KS distance {ks} exceeds the loose 0.05 threshold");
}
