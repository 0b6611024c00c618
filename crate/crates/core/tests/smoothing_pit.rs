use hsdm::diagnostics::ks_uniform;
use hsdm::rng::{open_unit, rng_from};
use hsdm::smoothing::{continuous_pit_of_smoothed, recover_integer, smooth_durations, DiscretePitState, IntegerCdf};
use proptest::prelude::*;

proptest! {
    #[test]
    fn smoothing_round_trips_to_the_integers(x in prop::collection::vec(1u64..50_000_000, 1..200), seed: u64) {
        let s = smooth_durations(&x, seed).unwrap();
        prop_assert_eq!(s.recover_integers(), x.clone());
        for (i, &y) in s.y.iter().enumerate() {
            prop_assert!(y > 0.0);
            let z = y.exp_m1();
            prop_assert!(z > (x[i] - 1) as f64 && z < x[i] as f64);
            prop_assert_eq!(recover_integer(y), x[i]);
        }
        prop_assert_eq!(smooth_durations(&x, seed).unwrap(), s);
    }

    #[test]
    fn randomized_and_continuous_pit_agree(
        pmf in prop::collection::vec(0.01f64..1.0, 1..12),
        draws in prop::collection::vec((0.0f64..1.0, 0.001f64..0.999), 1..60),
    ) {
        let total: f64 = pmf.iter().sum();
        let pmf: Vec<f64> = pmf.iter().map(|p| p / total).collect();
        let cdf = IntegerCdf::from_pmf(1, &pmf).unwrap();
        let xs: Vec<i64> = draws.iter().map(|(q, _)| cdf.quantile(q.max(1e-9))).collect();
        let v: Vec<f64> = draws.iter().map(|(_, v)| *v).collect();
        let cdfs = vec![cdf; xs.len()];
        let state = DiscretePitState::compute(&cdfs, &xs, &v).unwrap();
        let u: Vec<f64> = v.iter().map(|v| 1.0 - v).collect();
        let cont = continuous_pit_of_smoothed(&cdfs, &xs, &u);
        for i in 0..xs.len() {
            prop_assert!((state.residuals[i] - cont[i]).abs() <= 1e-12);
            prop_assert!(state.jumps[i] >= 0.0 && state.jumps[i] <= 1.0);
            prop_assert!((state.left_limits[i] + state.jumps[i] - state.cdf_values[i]).abs() <= 1e-15);
        }
    }
}

/// Poisson-like counts whose mean follows the previous count.
fn discrete_residuals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng_from(seed);
    let mut prev = 3i64;
    let (mut cdfs, mut xs, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let lambda = 1.0 + 0.5 * prev.min(10) as f64;
        let mut pmf = Vec::with_capacity(40);
        let mut p = (-lambda).exp();
        for k in 0..40 {
            pmf.push(p);
            p *= lambda / (k + 1) as f64;
        }
        let cdf = IntegerCdf::from_pmf(0, &pmf).unwrap();
        let x = cdf.quantile(open_unit(&mut rng));
        cdfs.push(cdf);
        xs.push(x);
        v.push(open_unit(&mut rng));
        prev = x;
    }
    DiscretePitState::compute(&cdfs, &xs, &v).unwrap().residuals
}

#[test]
fn randomized_pit_is_uniform_under_the_true_law() {
    let passed = (0..100u64)
        .filter(|&seed| ks_uniform(&discrete_residuals(seed, 10_000)).unwrap().1 > 0.01)
        .count();
    assert!(passed >= 95, "{passed}/100");
}
