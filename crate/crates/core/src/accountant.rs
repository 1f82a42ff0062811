//! Rényi-DP accounting for the (Poisson-subsampled) Gaussian mechanism.
//!
//! Per-step RDP is evaluated on a fixed grid of orders, composed additively
//! across steps and converted to `(ε, δ)` with
//! `ε = min_α rdp(α) + ln(1/δ) / (α − 1)`. Restricting the minimum to a grid
//! can only overestimate ε.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Failure probability used when none is given.
pub const DEFAULT_DELTA: f64 = 1e-5;

/// Largest noise multiplier [`calibrate_sigma`] will consider.
pub const SIGMA_CEILING: f64 = 1e4;

/// Relative width of the bracket returned by [`calibrate_sigma`].
pub const CALIBRATION_TOLERANCE: f64 = 1e-3;

const MAX_ORDER: u32 = 64;

/// Default order grid: `{1.25, 1.5} ∪ {2, …, 64}`.
pub fn default_orders() -> Vec<f64> {
    let mut v = vec![1.25, 1.5];
    v.extend((2..=MAX_ORDER).map(f64::from));
    v
}

/// Integer orders `2..=64`.
pub fn integer_orders() -> Vec<f64> {
    (2..=MAX_ORDER).map(f64::from).collect()
}

/// A Gaussian mechanism with noise multiplier `sigma` applied to a Poisson
/// subsample drawn with probability `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    sigma: f64,
    q: f64,
}

impl MechanismSpec {
    /// `sigma` may be `+∞` (a mechanism that releases nothing).
    pub fn new(sigma: f64, q: f64) -> Result<Self> {
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sigma must be > 0, got {sigma}"
            )));
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "q must be in (0, 1], got {q}"
            )));
        }
        Ok(Self { sigma, q })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn q(&self) -> f64 {
        self.q
    }
}

fn check_distributions(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "distributions must be non-empty and equally long ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    for (name, d) in [("p", p), ("q", q)] {
        if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "{name} has a negative or non-finite entry"
            )));
        }
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "{name} sums to {total}, not 1"
            )));
        }
    }
    if p.iter().zip(q).any(|(&a, &b)| a > 0.0 && b == 0.0) {
        return Err(Error::InvalidArgument(
            "support violation: q_i = 0 where p_i > 0".into(),
        ));
    }
    Ok(())
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Rényi divergence `D_α(p‖q) = 1/(α−1) · ln Σ p_i^α / q_i^(α−1)` for
/// `α > 0`, `α ≠ 1`.
pub fn renyi_divergence(p: &[f64], q: &[f64], alpha: f64) -> Result<f64> {
    if alpha == 1.0 {
        return Err(Error::InvalidArgument(
            "alpha = 1 is the KL limit; use kl_divergence".into(),
        ));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be > 0, got {alpha}"
        )));
    }
    check_distributions(p, q)?;
    let am1 = alpha - 1.0;
    let support: Vec<(f64, f64)> = p
        .iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(&a, &b)| (a, a.ln() - b.ln()))
        .collect();
    let spread = support
        .iter()
        .map(|(_, d)| (am1 * d).abs())
        .fold(0.0, f64::max);
    // Σ p_i · exp((α−1)·ln(p_i/q_i)); near α = 1 write it as 1 + Σ p·expm1(..)
    // so the KL-scale signal is not lost to cancellation.
    let log_sum = if spread < 1.0 {
        let mass: f64 = support.iter().map(|(a, _)| a).sum();
        let excess: f64 = support.iter().map(|(a, d)| a * (am1 * d).exp_m1()).sum();
        ((mass - 1.0) + excess).ln_1p()
    } else {
        log_sum_exp(support.iter().map(|(a, d)| a.ln() + am1 * d))
    };
    Ok((log_sum / am1).max(0.0))
}

/// `Σ p_i ln(p_i / q_i)` with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_distributions(p, q)?;
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// RDP of the Gaussian mechanism with sensitivity 1: `α / (2σ²)`.
pub fn rdp_gaussian(alpha: f64, sigma: f64) -> Result<f64> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be > 1, got {alpha}"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (0..k)
        .map(|i| f64::from(n - i).ln() - f64::from(i + 1).ln())
        .sum()
}

/// RDP at integer order `alpha ≥ 2` of the Poisson-subsampled Gaussian:
/// `1/(α−1) · ln Σ_k C(α,k) (1−q)^(α−k) q^k exp((k²−k) / 2σ²)`,
/// evaluated in log space.
pub fn rdp_subsampled_gaussian(spec: &MechanismSpec, alpha: u32) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::InvalidArgument(format!(
            "integer order must be >= 2, got {alpha}"
        )));
    }
    let MechanismSpec { sigma, q } = *spec;
    if sigma == f64::INFINITY {
        return Ok(0.0);
    }
    if q == 1.0 {
        return rdp_gaussian(f64::from(alpha), sigma);
    }
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let two_var = 2.0 * sigma * sigma;
    let log_moment = log_sum_exp((0..=alpha).map(|k| {
        let kf = f64::from(k);
        ln_binomial(alpha, k) + f64::from(alpha - k) * ln_1mq + kf * ln_q + (kf * kf - kf) / two_var
    }));
    Ok((log_moment / f64::from(alpha - 1)).max(0.0))
}

/// RDP of one mechanism invocation at an arbitrary order on the grid.
///
/// Fractional orders below 2 are exact for the unsubsampled Gaussian. For
/// subsampled mechanisms they take the order-2 value, a valid upper bound
/// since RDP is non-decreasing in the order; such a point can never beat
/// order 2 in the conversion, so the effective grid is the integers.
fn mechanism_rdp(spec: &MechanismSpec, alpha: f64) -> Result<f64> {
    if spec.sigma == f64::INFINITY {
        return Ok(0.0);
    }
    if spec.q == 1.0 {
        return rdp_gaussian(alpha, spec.sigma);
    }
    if alpha.fract() == 0.0 && alpha >= 2.0 {
        return rdp_subsampled_gaussian(spec, alpha as u32);
    }
    if alpha > 1.0 && alpha < 2.0 {
        return rdp_subsampled_gaussian(spec, 2);
    }
    Err(Error::InvalidArgument(format!(
        "order {alpha} unsupported for a subsampled mechanism"
    )))
}

/// Accumulated RDP of one mechanism on a grid of orders.
///
/// Stores the single-step curve and a step count, so composition is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    per_step: Vec<f64>,
    steps: u64,
}

impl RdpCurve {
    /// Zero-step curve for `spec` on the default order grid.
    pub fn new(spec: &MechanismSpec) -> Result<Self> {
        Self::with_orders(spec, default_orders())
    }

    pub fn with_orders(spec: &MechanismSpec, orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() || orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "orders must be non-empty and strictly increasing".into(),
            ));
        }
        let per_step = orders
            .iter()
            .map(|&a| mechanism_rdp(spec, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            orders,
            per_step,
            steps: 0,
        })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn per_step(&self) -> &[f64] {
        &self.per_step
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Accumulated RDP at each order.
    pub fn rdp(&self) -> Vec<f64> {
        let t = self.steps as f64;
        self.per_step.iter().map(|r| r * t).collect()
    }

    /// `(order, accumulated rdp)` pairs.
    pub fn pairs(&self) -> Vec<[f64; 2]> {
        self.orders
            .iter()
            .zip(self.rdp())
            .map(|(&a, r)| [a, r])
            .collect()
    }
}

/// Adds `steps` further invocations of the curve's mechanism.
pub fn compose(curve: &RdpCurve, steps: i64) -> Result<RdpCurve> {
    let add = u64::try_from(steps)
        .map_err(|_| Error::InvalidArgument(format!("steps must be >= 0, got {steps}")))?;
    let mut out = curve.clone();
    out.steps += add;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpent {
    pub epsilon: f64,
    pub delta: f64,
    pub optimal_alpha: f64,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must be in (0, 1), got {delta}"
        )));
    }
    Ok(())
}

fn eps_from_rdp(orders: &[f64], rdp: &[f64], delta: f64) -> PrivacySpent {
    if rdp.iter().all(|&r| r == 0.0) {
        return PrivacySpent {
            epsilon: 0.0,
            delta,
            optimal_alpha: *orders.last().unwrap(),
        };
    }
    let log_inv_delta = -delta.ln();
    let (epsilon, optimal_alpha) = orders
        .iter()
        .zip(rdp)
        .map(|(&a, &r)| (r + log_inv_delta / (a - 1.0), a))
        .fold((f64::INFINITY, orders[0]), |best, cur| {
            if cur.0 < best.0 {
                cur
            } else {
                best
            }
        });
    PrivacySpent {
        epsilon,
        delta,
        optimal_alpha,
    }
}

/// Converts accumulated RDP to an `(ε, δ)` guarantee.
pub fn to_eps_delta(curve: &RdpCurve, delta: f64) -> Result<PrivacySpent> {
    check_delta(delta)?;
    Ok(eps_from_rdp(&curve.orders, &curve.rdp(), delta))
}

/// ε after `steps` invocations of `spec`.
pub fn epsilon_for(spec: &MechanismSpec, steps: u64, delta: f64) -> Result<PrivacySpent> {
    let curve = compose(&RdpCurve::new(spec)?, steps as i64)?;
    to_eps_delta(&curve, delta)
}

/// Smallest noise multiplier (to relative tolerance 1e-3) whose ε after
/// `steps` steps at sampling rate `q` does not exceed `target_eps`.
pub fn calibrate_sigma(target_eps: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if !(target_eps > 0.0 && target_eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target epsilon must be positive and finite, got {target_eps}"
        )));
    }
    check_delta(delta)?;
    MechanismSpec::new(1.0, q)?;
    let eps_at = |sigma: f64| -> Result<f64> {
        Ok(epsilon_for(&MechanismSpec::new(sigma, q)?, steps, delta)?.epsilon)
    };
    let mut hi = SIGMA_CEILING;
    let ceiling_eps = eps_at(hi)?;
    if ceiling_eps > target_eps {
        return Err(Error::CalibrationFailed(format!(
            "epsilon {target_eps} unreachable: sigma = {SIGMA_CEILING} still gives {ceiling_eps:.6}"
        )));
    }
    let mut lo = 1e-2;
    while eps_at(lo)? <= target_eps {
        if lo < 1e-6 {
            return Ok(lo);
        }
        hi = lo;
        lo /= 4.0;
    }
    while hi / lo > 1.0 + CALIBRATION_TOLERANCE {
        let mid = (lo * hi).sqrt();
        if eps_at(mid)? <= target_eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Classic Gaussian-mechanism calibration `Δ · sqrt(2 ln(1.25/δ)) / ε`.
pub fn classic_gaussian_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "classic calibration needs 0 < epsilon <= 1, got {epsilon}"
        )));
    }
    check_delta(delta)?;
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sensitivity must be positive, got {sensitivity}"
        )));
    }
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Running ledger of mechanism invocations for one training run.
///
/// Steps taken without noise (`σ = 0`) are counted but make ε infinite.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    entries: Vec<(MechanismSpec, RdpCurve)>,
    noiseless_steps: u64,
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Charges one invocation of `spec`.
    pub fn step(&mut self, spec: &MechanismSpec) -> Result<()> {
        if let Some((_, curve)) = self.entries.iter_mut().find(|(s, _)| s == spec) {
            curve.steps += 1;
            return Ok(());
        }
        let mut curve = RdpCurve::new(spec)?;
        curve.steps = 1;
        self.entries.push((*spec, curve));
        Ok(())
    }

    /// Charges one step with noise multiplier `sigma` (possibly 0) at
    /// sampling rate `q`.
    pub fn record(&mut self, sigma: f64, q: f64) -> Result<()> {
        if sigma == 0.0 {
            MechanismSpec::new(1.0, q)?;
            self.noiseless_steps += 1;
            return Ok(());
        }
        self.step(&MechanismSpec::new(sigma, q)?)
    }

    pub fn step_count(&self) -> u64 {
        self.noiseless_steps + self.entries.iter().map(|(_, c)| c.steps).sum::<u64>()
    }

    /// Total accumulated RDP on the default order grid.
    pub fn total_rdp(&self) -> Vec<[f64; 2]> {
        let orders = default_orders();
        let mut total = vec![0.0; orders.len()];
        if self.noiseless_steps > 0 {
            total.fill(f64::INFINITY);
        }
        for (_, c) in &self.entries {
            for (t, r) in total.iter_mut().zip(c.rdp()) {
                *t += r;
            }
        }
        orders.into_iter().zip(total).map(|(a, r)| [a, r]).collect()
    }

    pub fn spent(&self, delta: f64) -> Result<PrivacySpent> {
        check_delta(delta)?;
        let pairs = self.total_rdp();
        let orders: Vec<f64> = pairs.iter().map(|p| p[0]).collect();
        let rdp: Vec<f64> = pairs.iter().map(|p| p[1]).collect();
        Ok(eps_from_rdp(&orders, &rdp, delta))
    }
}

/// Accountant query as exchanged on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountantQuery {
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantAnswer {
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
    pub optimal_alpha: f64,
    pub curve: Vec<[f64; 2]>,
}

/// Runs the forward accountant for a query.
pub fn answer_query(query: &AccountantQuery) -> Result<AccountantAnswer> {
    let spec = MechanismSpec::new(query.sigma, query.q)?;
    let curve = compose(&RdpCurve::new(&spec)?, query.steps as i64)?;
    let spent = to_eps_delta(&curve, query.delta)?;
    Ok(AccountantAnswer {
        sigma: query.sigma,
        q: query.q,
        steps: query.steps,
        delta: query.delta,
        epsilon: spent.epsilon,
        optimal_alpha: spent.optimal_alpha,
        curve: curve.pairs(),
    })
}
