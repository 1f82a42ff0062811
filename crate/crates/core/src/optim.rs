//! DP-Adam: Poisson subsampling, per-sample clipping, noisy aggregation and
//! Adam moment updates, plus the non-private reference Adam step.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{MechanismSpec, PrivacyLedger};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mechanisms::{aggregate_noisy, clip_gradient, ClipSpec, NoiseMode, NoiseSpec};
use crate::model::Model;
use crate::tensor::GradientSet;

/// How the update direction is formed from the moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdamVariant {
    /// `w = m / (u + ε̂)`: no square root on the second moment.
    Linear,
    /// `w = m̂ / (sqrt(û) + ε̂)`.
    #[default]
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Added to the denominator of the update.
    pub stabilizer: f64,
    pub variant: AdamVariant,
    pub bias_correction: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.08,
            beta1: 0.9,
            beta2: 0.999,
            stabilizer: 1e-8,
            variant: AdamVariant::Standard,
            bias_correction: true,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::InvalidArgument(format!(
                "betas must be in [0, 1): {} {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.stabilizer > 0.0 && self.stabilizer.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "adam stabilizer must be > 0, got {}",
                self.stabilizer
            )));
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: GradientSet,
    pub u: GradientSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let shapes = model.param_shapes();
        Self {
            m: GradientSet::zeros(&shapes),
            u: GradientSet::zeros(&shapes),
            t: 0,
        }
    }
}

fn check_aligned(model: &Model, state: &AdamState, grad: &GradientSet) -> Result<()> {
    let shapes = model.param_shapes();
    let ok = |g: &GradientSet| g.shapes() == shapes;
    if !ok(&state.m) || !ok(&state.u) || !ok(grad) {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![model.param_count()],
            rhs: vec![grad.numel()],
        });
    }
    Ok(())
}

/// One Adam update of every trainable parameter from `grad`.
pub fn adam_step(
    model: &mut Model,
    grad: &GradientSet,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    check_aligned(model, state, grad)?;
    state.t += 1;
    let t = state.t as f64;
    let (c1, c2) = match (cfg.variant, cfg.bias_correction) {
        (AdamVariant::Standard, true) => (1.0 - cfg.beta1.powf(t), 1.0 - cfg.beta2.powf(t)),
        _ => (1.0, 1.0),
    };
    let mask = model.trainable_mask();
    let params = model.params_mut();
    for (k, trainable) in mask.into_iter().enumerate() {
        if !trainable {
            continue;
        }
        let g = grad.tensors()[k].data();
        let m = state.m.tensors_mut()[k].data_mut();
        let u = state.u.tensors_mut()[k].data_mut();
        let theta = params[k].data_mut();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            u[i] = cfg.beta2 * u[i] + (1.0 - cfg.beta2) * (g[i] * g[i]);
            let w = match cfg.variant {
                AdamVariant::Linear => m[i] / (u[i] + cfg.stabilizer),
                AdamVariant::Standard => (m[i] / c1) / ((u[i] / c2).sqrt() + cfg.stabilizer),
            };
            theta[i] -= cfg.lr * w;
        }
    }
    Ok(())
}

/// Includes each of `0..n` independently with probability `p`.
pub fn poisson_subsample<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "sampling probability must be in [0, 1], got {p}"
        )));
    }
    Ok((0..n).filter(|_| rng.random::<f64>() < p).collect())
}

/// Everything one DP-Adam step needs besides the model, data and state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpStepConfig {
    pub clip: ClipSpec,
    pub noise: NoiseSpec,
    pub sample_rate: f64,
    pub noise_mode: NoiseMode,
    pub adam: AdamConfig,
}

/// What happened during one DP-Adam step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// `false` when the Poisson batch was empty and nothing was updated.
    pub applied: bool,
    pub batch_size: usize,
    pub pre_clip_norm_min: f64,
    pub pre_clip_norm_mean: f64,
    pub pre_clip_norm_max: f64,
    pub post_clip_norm_max: f64,
    pub noisy_grad_norm: f64,
    pub mean_loss: f64,
}

impl StepOutcome {
    fn skipped() -> Self {
        Self {
            applied: false,
            batch_size: 0,
            pre_clip_norm_min: 0.0,
            pre_clip_norm_mean: 0.0,
            pre_clip_norm_max: 0.0,
            post_clip_norm_max: 0.0,
            noisy_grad_norm: 0.0,
            mean_loss: f64::NAN,
        }
    }
}

/// One DP-Adam iteration.
///
/// Refuses models that fail [`crate::model::validate_model`]. An empty
/// Poisson batch leaves the parameters untouched but is still charged to
/// `ledger`.
#[allow(clippy::too_many_arguments)]
pub fn dp_adam_step<P: Rng + ?Sized, N: Rng + ?Sized>(
    model: &mut Model,
    data: &Dataset,
    state: &mut AdamState,
    cfg: &DpStepConfig,
    ledger: &mut PrivacyLedger,
    poisson_rng: &mut P,
    noise_rng: &mut N,
) -> Result<StepOutcome> {
    let report = model.validate();
    if !report.is_valid() {
        let names: Vec<String> = report
            .violations
            .iter()
            .map(|v| format!("layer {} ({})", v.layer_index, v.layer))
            .collect();
        return Err(Error::ValidationFailed(names.join(", ")));
    }
    cfg.adam.validate()?;
    if data.dim() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "dp_adam_step",
            lhs: vec![data.dim()],
            rhs: vec![model.input_dim()],
        });
    }
    let zero = GradientSet::zeros(&model.param_shapes());
    check_aligned(model, state, &zero)?;
    // the ledger must be able to charge this step before anything is drawn
    if cfg.noise.sigma() > 0.0 {
        MechanismSpec::new(cfg.noise.sigma(), cfg.sample_rate)?;
    } else {
        MechanismSpec::new(1.0, cfg.sample_rate)?;
    }

    let batch = poisson_subsample(data.len(), cfg.sample_rate, poisson_rng)?;
    if batch.is_empty() {
        ledger.record(cfg.noise.sigma(), cfg.sample_rate)?;
        return Ok(StepOutcome::skipped());
    }

    let frozen_model = &*model;
    let per_sample: Vec<(f64, GradientSet)> = batch
        .par_iter()
        .map(|&i| {
            let (loss, mut g) = frozen_model.per_sample_gradient(data.row(i), data.label(i))?;
            frozen_model.mask_frozen(&mut g);
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;

    let norms: Vec<f64> = per_sample.iter().map(|(_, g)| g.global_l2_norm()).collect();
    let post_clip_norm_max = per_sample
        .iter()
        .map(|(_, g)| clip_gradient(g, &cfg.clip).map(|c| c.global_l2_norm()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let mean_loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / batch.len() as f64;
    let grads: Vec<GradientSet> = per_sample.into_iter().map(|(_, g)| g).collect();

    let mut noisy = aggregate_noisy(&grads, &cfg.clip, &cfg.noise, cfg.noise_mode, noise_rng)?;
    model.mask_frozen(&mut noisy);
    adam_step(model, &noisy, state, &cfg.adam)?;
    ledger.record(cfg.noise.sigma(), cfg.sample_rate)?;

    Ok(StepOutcome {
        applied: true,
        batch_size: batch.len(),
        pre_clip_norm_min: norms.iter().copied().fold(f64::INFINITY, f64::min),
        pre_clip_norm_mean: norms.iter().sum::<f64>() / norms.len() as f64,
        pre_clip_norm_max: norms.iter().copied().fold(0.0, f64::max),
        post_clip_norm_max,
        noisy_grad_norm: noisy.global_l2_norm(),
        mean_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mlp, NormKind};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn poisson_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(poisson_subsample(100, 0.0, &mut rng).unwrap().is_empty());
        assert_eq!(
            poisson_subsample(100, 1.0, &mut rng).unwrap(),
            (0..100).collect::<Vec<_>>()
        );
        assert!(poisson_subsample(10, 1.5, &mut rng).is_err());
        assert!(poisson_subsample(10, -0.1, &mut rng).is_err());
    }

    #[test]
    fn poisson_size_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = poisson_subsample(10_000, 0.5, &mut rng).unwrap().len();
        assert!((4850..=5150).contains(&n), "{n}");
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // f(θ) = ‖θ‖², ∇f = 2θ
        let mut model = build_mlp(&[3, 1], NormKind::None, 1).unwrap();
        model.params_mut()[1].data_mut()[0] = 0.7;
        let mut state = AdamState::new(&model);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        for _ in 0..500 {
            let g = GradientSet::new(model.params().iter().map(|p| p.map(|v| 2.0 * v)).collect());
            adam_step(&mut model, &g, &mut state, &cfg).unwrap();
        }
        let norm = GradientSet::new(model.params().to_vec()).global_l2_norm();
        assert!(norm < 1e-3, "{norm}");
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut model = build_mlp(&[3, 2, 1], NormKind::None, 1).unwrap();
        let before = model.clone();
        let mut state = AdamState::new(&model);
        let zero = GradientSet::zeros(&model.param_shapes());
        for variant in [AdamVariant::Standard, AdamVariant::Linear] {
            let cfg = AdamConfig {
                variant,
                bias_correction: false,
                ..AdamConfig::default()
            };
            adam_step(&mut model, &zero, &mut state, &cfg).unwrap();
        }
        assert_eq!(model, before);
        assert!(state.m.values().all(|v| v == 0.0) && state.u.values().all(|v| v == 0.0));
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut model = build_mlp(&[2, 1], NormKind::None, 1).unwrap();
        let mut state = AdamState::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let g = GradientSet::new(
                model
                    .param_shapes()
                    .iter()
                    .map(|s| {
                        let mut t = Tensor::zeros(s);
                        t.data_mut()
                            .iter_mut()
                            .for_each(|v| *v = rng.random_range(-5.0..5.0));
                        t
                    })
                    .collect(),
            );
            adam_step(&mut model, &g, &mut state, &AdamConfig::default()).unwrap();
            assert!(state.u.values().all(|v| v >= 0.0));
        }
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut model = build_mlp(&[2, 3, 1], NormKind::None, 1).unwrap();
        model.set_freeze_prefix(1).unwrap();
        let before = model.clone();
        let mut state = AdamState::new(&model);
        let ones = GradientSet::new(
            model
                .param_shapes()
                .iter()
                .map(|s| Tensor::full(s, 1.0))
                .collect(),
        );
        adam_step(&mut model, &ones, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(model.params()[0], before.params()[0]);
        assert_eq!(model.params()[1], before.params()[1]);
        assert_ne!(model.params()[2], before.params()[2]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut model = build_mlp(&[2, 1], NormKind::None, 1).unwrap();
        let mut state = AdamState::new(&model);
        let bad = GradientSet::zeros(&[vec![3, 1], vec![1]]);
        assert!(matches!(
            adam_step(&mut model, &bad, &mut state, &AdamConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
