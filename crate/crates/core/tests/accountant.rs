mod support;

use dpadam::accountant::{
    calibrate_sigma, classic_gaussian_sigma, compose, default_orders, epsilon_for, kl_divergence,
    rdp_gaussian, rdp_subsampled_gaussian, renyi_divergence, to_eps_delta, MechanismSpec,
    PrivacyLedger, RdpCurve, DEFAULT_DELTA,
};
use dpadam::Error;
use proptest::prelude::*;

fn eps(sigma: f64, q: f64, steps: u64) -> f64 {
    epsilon_for(&MechanismSpec::new(sigma, q).unwrap(), steps, DEFAULT_DELTA)
        .unwrap()
        .epsilon
}

#[test]
fn gaussian_rdp_matches_quadrature() {
    for (alpha, sigma, expected) in [(2.0, 1.0, 1.0), (3.0, 2.0, 0.375)] {
        let closed = rdp_gaussian(alpha, sigma).unwrap();
        assert!((closed - expected).abs() < 1e-15);
        let numeric = support::quadrature_rdp(alpha, sigma, 1.0);
        assert!((numeric - expected).abs() < 1e-9, "{numeric}");
    }
    assert!(rdp_gaussian(1.0, 1.0).is_err() && rdp_gaussian(2.0, 0.0).is_err());
}

#[test]
fn gaussian_rdp_vanishes_with_large_sigma() {
    let values: Vec<f64> = [1.0, 10.0, 100.0, 1e3, 1e4]
        .iter()
        .map(|&s| rdp_gaussian(4.0, s).unwrap())
        .collect();
    assert!(values.windows(2).all(|w| w[1] < w[0]));
    assert!(values[4] < 1e-7);
}

#[test]
fn subsampled_rdp_examples() {
    let full = MechanismSpec::new(1.0, 1.0).unwrap();
    assert!((rdp_subsampled_gaussian(&full, 2).unwrap() - 1.0).abs() < 1e-12);
    let sparse = MechanismSpec::new(1.0, 0.01).unwrap();
    let closed = rdp_subsampled_gaussian(&sparse, 2).unwrap();
    let numeric = support::quadrature_rdp(2.0, 1.0, 0.01);
    assert!(
        (closed / numeric - 1.0).abs() < 0.01,
        "{closed} vs {numeric}"
    );
    let tiny = MechanismSpec::new(1.0, 1e-9).unwrap();
    assert!(rdp_subsampled_gaussian(&tiny, 8).unwrap() < 1e-12);
    assert!(MechanismSpec::new(1.0, 0.0).is_err() && MechanismSpec::new(0.0, 0.5).is_err());
}

#[test]
fn subsampled_rdp_matches_quadrature_across_orders() {
    for &(sigma, q) in &[(0.8, 0.05), (1.5, 0.2), (4.0, 0.5)] {
        let spec = MechanismSpec::new(sigma, q).unwrap();
        for alpha in [2u32, 3, 5, 8, 16] {
            let closed = rdp_subsampled_gaussian(&spec, alpha).unwrap();
            let numeric = support::quadrature_rdp(alpha as f64, sigma, q);
            assert!(
                (closed - numeric).abs() <= 1e-6 * numeric.max(1e-6),
                "σ={sigma} q={q} α={alpha}: {closed} vs {numeric}"
            );
        }
    }
}

#[test]
fn composition_examples() {
    let c = RdpCurve::new(&MechanismSpec::new(1.1, 0.02).unwrap()).unwrap();
    let zero = compose(&c, 0).unwrap();
    assert!(zero.rdp().iter().all(|&r| r == 0.0));
    assert_eq!(to_eps_delta(&zero, 1e-5).unwrap().epsilon, 0.0);
    let one = compose(&c, 1).unwrap();
    let two = compose(&c, 2).unwrap();
    for (a, b) in one.rdp().iter().zip(two.rdp()) {
        assert_eq!(2.0 * a, b);
    }
    assert_eq!(
        compose(&compose(&c, 3).unwrap(), 4).unwrap(),
        compose(&c, 7).unwrap()
    );
    assert!(matches!(compose(&c, -1), Err(Error::InvalidArgument(_))));
}

#[test]
fn single_gaussian_step_example() {
    let spent = epsilon_for(&MechanismSpec::new(1.0, 1.0).unwrap(), 1, 1e-5).unwrap();
    // exhaustive oracle over integer orders
    let (oracle, arg) = (2..=64)
        .map(|a| (a as f64 / 2.0 + 1e5f64.ln() / (a as f64 - 1.0), a as f64))
        .fold((f64::INFINITY, 0.0), |b, c| if c.0 < b.0 { c } else { b });
    assert!((spent.epsilon - oracle).abs() < 1e-12);
    assert_eq!((spent.optimal_alpha, arg), (6.0, 6.0));
    assert!((spent.epsilon - 5.3026).abs() < 1e-4);
}

#[test]
fn delta_must_be_a_probability() {
    let c = compose(
        &RdpCurve::new(&MechanismSpec::new(1.0, 1.0).unwrap()).unwrap(),
        1,
    )
    .unwrap();
    for bad in [0.0, 1.0, -0.1, 2.0] {
        assert!(to_eps_delta(&c, bad).is_err());
    }
}

#[test]
fn calibration_inverts_forward_accountant() {
    let sigma = calibrate_sigma(5.3026, 1e-5, 1.0, 1).unwrap();
    assert!((sigma - 1.0).abs() < 0.005, "{sigma}");
    for &(target, q, steps) in &[(1.0, 0.01, 1000), (8.0, 0.05, 300), (0.5, 0.001, 10_000)] {
        let sigma = calibrate_sigma(target, 1e-5, q, steps).unwrap();
        assert!(eps(sigma, q, steps) <= target);
        assert!(eps(1.01 * sigma, q, steps) <= eps(sigma, q, steps));
        // within tolerance of the boundary: slightly less noise overshoots
        assert!(eps(sigma / 1.002, q, steps) > target);
    }
    let by_steps: Vec<f64> = [10, 100, 1000, 10_000]
        .iter()
        .map(|&t| calibrate_sigma(2.0, 1e-5, 0.01, t).unwrap())
        .collect();
    assert!(by_steps.windows(2).all(|w| w[1] >= w[0]), "{by_steps:?}");
}

#[test]
fn unreachable_target_is_a_calibration_failure() {
    assert!(matches!(
        calibrate_sigma(0.01, 1e-5, 0.01, 1000),
        Err(Error::CalibrationFailed(_))
    ));
    assert!(calibrate_sigma(0.0, 1e-5, 0.01, 10).is_err());
}

#[test]
fn classic_calibration() {
    let s = classic_gaussian_sigma(1.0, 1e-5, 1.0).unwrap();
    assert!((s - (2.0 * 125_000f64.ln()).sqrt()).abs() < 1e-12);
    assert!((s - 4.8445).abs() < 5e-4);
    let doubled = classic_gaussian_sigma(0.5, 1e-5, 2.0).unwrap();
    assert!((doubled - 2.0 * classic_gaussian_sigma(0.5, 1e-5, 1.0).unwrap()).abs() < 1e-12);
    // shrinks as δ grows toward its upper limit
    let by_delta: Vec<f64> = [1e-9, 1e-5, 1e-2, 0.5, 0.999]
        .iter()
        .map(|&d| classic_gaussian_sigma(0.5, d, 1.0).unwrap())
        .collect();
    assert!(by_delta.windows(2).all(|w| w[1] < w[0]), "{by_delta:?}");
    assert!(classic_gaussian_sigma(1.5, 1e-5, 1.0).is_err());
    assert!(classic_gaussian_sigma(0.5, 1e-5, 0.0).is_err());
}

#[test]
fn divergence_examples() {
    let p = [0.3, 0.7];
    assert_eq!(renyi_divergence(&p, &p, 3.0).unwrap(), 0.0);
    assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    let (a, b) = ([1.0, 0.0], [0.5, 0.5]);
    assert!((renyi_divergence(&a, &b, 2.0).unwrap() - 2f64.ln()).abs() < 1e-12);
    assert!((kl_divergence(&a, &b).unwrap() - 2f64.ln()).abs() < 1e-12);
    let (c, d) = ([0.2, 0.5, 0.3], [0.4, 0.4, 0.2]);
    let near = renyi_divergence(&c, &d, 1.0 + 1e-6).unwrap();
    assert!((near - kl_divergence(&c, &d).unwrap()).abs() < 1e-4);
    assert!(renyi_divergence(&c, &d, 1.0).is_err());
    assert!(renyi_divergence(&[0.5, 0.5], &[1.0, 0.0], 2.0).is_err());
}

#[test]
fn ledger_counts_and_matches_forward_accountant() {
    let spec = MechanismSpec::new(0.9, 0.03).unwrap();
    let mut ledger = PrivacyLedger::new();
    assert_eq!(ledger.spent(1e-5).unwrap().epsilon, 0.0);
    for _ in 0..250 {
        ledger.step(&spec).unwrap();
    }
    assert_eq!(ledger.step_count(), 250);
    let forward = epsilon_for(&spec, 250, 1e-5).unwrap();
    assert!((ledger.spent(1e-5).unwrap().epsilon - forward.epsilon).abs() < 1e-12);
    ledger.record(0.0, 0.03).unwrap();
    assert_eq!(ledger.step_count(), 251);
    assert!(ledger.spent(1e-5).unwrap().epsilon.is_infinite());
}

#[test]
fn epsilon_is_monotone_over_grid() {
    let sigmas = [0.6, 0.9, 1.3, 2.0, 4.0];
    let qs = [0.001, 0.01, 0.1, 1.0];
    let steps = [1u64, 10, 100, 1000];
    for &q in &qs {
        for &t in &steps {
            let by_sigma: Vec<f64> = sigmas.iter().map(|&s| eps(s, q, t)).collect();
            assert!(
                by_sigma.windows(2).all(|w| w[1] < w[0]),
                "q={q} T={t} {by_sigma:?}"
            );
        }
    }
    for &s in &sigmas {
        for &q in &qs {
            let by_t: Vec<f64> = steps.iter().map(|&t| eps(s, q, t)).collect();
            assert!(by_t.windows(2).all(|w| w[1] >= w[0]));
        }
        for &t in &steps {
            let by_q: Vec<f64> = qs.iter().map(|&q| eps(s, q, t)).collect();
            assert!(by_q.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}

#[test]
fn default_grid_shape() {
    let orders = default_orders();
    assert!(orders.windows(2).all(|w| w[1] > w[0]));
    assert_eq!((orders[0], orders[1]), (1.25, 1.5));
    assert_eq!(*orders.last().unwrap(), 64.0);
    assert_eq!(orders.len(), 65);
}

fn prob_vector(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn renyi_is_nondecreasing_in_order(
        raw in proptest::collection::vec((0.05f64..1.0, 0.05f64..1.0), 2..6),
    ) {
        let p = prob_vector(&raw.iter().map(|r| r.0).collect::<Vec<_>>());
        let q = prob_vector(&raw.iter().map(|r| r.1).collect::<Vec<_>>());
        let alphas = [0.25, 0.5, 0.9, 1.1, 1.5, 2.0, 3.0, 5.0, 10.0, 30.0];
        let values: Vec<f64> = alphas.iter().map(|&a| renyi_divergence(&p, &q, a).unwrap()).collect();
        for w in values.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "{values:?}");
        }
    }

    #[test]
    fn renyi_is_nonnegative_and_zero_only_on_equality(
        raw in proptest::collection::vec((0.05f64..1.0, 0.05f64..1.0), 2..6),
        alpha in prop_oneof![0.1f64..0.99, 1.01f64..40.0],
    ) {
        let p = prob_vector(&raw.iter().map(|r| r.0).collect::<Vec<_>>());
        let q = prob_vector(&raw.iter().map(|r| r.1).collect::<Vec<_>>());
        let d = renyi_divergence(&p, &q, alpha).unwrap();
        prop_assert!(d >= -1e-15);
        // rounding in Σ p^α p^(1-α) is amplified by 1/(α−1) near α = 1
        prop_assert!(renyi_divergence(&p, &p, alpha).unwrap().abs() < 1e-12);
        let distance = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if distance > 1e-3 {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn composition_is_additive(sigma in 0.5f64..5.0, q in 0.001f64..1.0, a in 0i64..500, b in 0i64..500) {
        let c = RdpCurve::new(&MechanismSpec::new(sigma, q).unwrap()).unwrap();
        let split = compose(&compose(&c, a).unwrap(), b).unwrap();
        prop_assert_eq!(&split, &compose(&c, a + b).unwrap());
        prop_assert_eq!(split.steps(), (a + b) as u64);
        let one = compose(&c, 1).unwrap().rdp();
        for (r, r1) in split.rdp().iter().zip(one) {
            prop_assert!(*r >= 0.0);
            prop_assert!((r - (a + b) as f64 * r1).abs() <= 1e-12 * r.max(1.0));
        }
    }

    #[test]
    fn doubling_steps_never_decreases_epsilon(sigma in 0.5f64..5.0, q in 0.001f64..1.0, t in 1u64..2000) {
        prop_assert!(eps(sigma, q, 2 * t) >= eps(sigma, q, t));
    }
}
