//! Shared test oracles and fixtures.
#![allow(dead_code)]

use dpadam::model::{build_mlp, Model, NormKind};
use rand::Rng;

/// Log-density of `N(mu, sigma²)`.
fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `log((1 − q)·N(0,σ²)(x) + q·N(1,σ²)(x)) − log N(0,σ²)(x)`
fn log_ratio(x: f64, sigma: f64, q: f64) -> f64 {
    let shift = (2.0 * x - 1.0) / (2.0 * sigma * sigma);
    if q == 1.0 {
        return shift;
    }
    // log((1-q) + q·e^shift) without overflow
    let a = (1.0 - q).ln();
    let b = q.ln() + shift;
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// `log ∫ exp(g(x)) dx` over `[lo, hi]` by adaptive Simpson on a fine
/// panel grid, shifted by the grid maximum to stay in range.
pub fn log_integrate<G: Fn(f64) -> f64>(g: G, lo: f64, hi: f64, panels: usize) -> f64 {
    let width = (hi - lo) / panels as f64;
    let xs: Vec<f64> = (0..=2 * panels)
        .map(|i| lo + 0.5 * width * i as f64)
        .collect();
    let gs: Vec<f64> = xs.iter().map(|&x| g(x)).collect();
    let shift = gs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let f = |x: f64| (g(x) - shift).exp();
    let mut total = 0.0;
    for p in 0..panels {
        let (a, b) = (xs[2 * p], xs[2 * p + 2]);
        let (fa, fm, fb) = (
            (gs[2 * p] - shift).exp(),
            (gs[2 * p + 1] - shift).exp(),
            (gs[2 * p + 2] - shift).exp(),
        );
        let whole = simpson(a, b, fa, fm, fb);
        total += adaptive(&f, a, b, fa, fm, fb, whole, 1e-15, 30);
    }
    shift + total.ln()
}

/// Rényi divergence of order `alpha` between the two output distributions
/// of the subsampled Gaussian mechanism on neighbouring inputs, by direct
/// numerical integration; the larger of the two directions.
pub fn quadrature_rdp(alpha: f64, sigma: f64, q: f64) -> f64 {
    let lo = -alpha - 40.0 * sigma - 1.0;
    let hi = alpha + 40.0 * sigma + 1.0;
    // E_{μ0}[(μ1/μ0)^α]
    let fwd = log_integrate(
        |x| log_normal(x, 0.0, sigma) + alpha * log_ratio(x, sigma, q),
        lo,
        hi,
        4000,
    );
    // E_{μ1}[(μ0/μ1)^α] = E_{μ0}[(μ1/μ0)^(1-α)]
    let bwd = log_integrate(
        |x| log_normal(x, 0.0, sigma) + (1.0 - alpha) * log_ratio(x, sigma, q),
        lo,
        hi,
        4000,
    );
    (fwd.max(bwd) / (alpha - 1.0)).max(0.0)
}

/// ε from per-step quadrature RDP on `orders` after `steps` compositions.
pub fn quadrature_epsilon(per_step: &[(f64, f64)], steps: u64, delta: f64) -> f64 {
    per_step
        .iter()
        .map(|&(a, r)| steps as f64 * r + (1.0 / delta).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min)
}

/// A small random MLP: input 1–5, one or two hidden layers, scalar output;
/// group norm (dividing the hidden width) half the time.
pub fn random_mlp<R: Rng>(rng: &mut R, allow_norm: bool) -> Model {
    let input = rng.random_range(1..=5);
    let hidden_layers = rng.random_range(1..=2);
    let norm = if allow_norm && rng.random::<bool>() {
        NormKind::Group {
            groups: rng.random_range(1..=2),
        }
    } else {
        NormKind::None
    };
    let mut widths = vec![input];
    for _ in 0..hidden_layers {
        let w = match norm {
            NormKind::Group { groups } => groups * rng.random_range(2..=3),
            NormKind::None => rng.random_range(2..=6),
        };
        widths.push(w);
    }
    widths.push(1);
    let mut model = build_mlp(&widths, norm, rng.random()).expect("valid random widths");
    // Zero-initialised biases put pre-activations exactly on the ReLU kink
    // whenever a whole layer is dead, where central differences are
    // meaningless; jitter every parameter.
    for t in model.params_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    model
}

pub fn random_input<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Sample median (mean of the middle pair for even counts).
pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
