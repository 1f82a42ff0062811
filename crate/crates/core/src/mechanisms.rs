//! Per-sample L2 clipping, calibrated Gaussian noise and noisy aggregation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradientSet, Tensor};

/// Per-sample global L2 bound `R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    bound: f64,
}

impl ClipSpec {
    pub fn new(bound: f64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "clip bound must be positive and finite, got {bound}"
            )));
        }
        Ok(Self { bound })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }
}

/// Noise multiplier `σ`; the per-coordinate standard deviation is `σ·R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise multiplier must be non-negative and finite, got {sigma}"
            )));
        }
        Ok(Self { sigma, seed })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Where the Gaussian noise enters the batch average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `mean(clipped) + σR·N(0, I)`
    #[default]
    AverageThenNoise,
    /// `(Σ clipped + σR·N(0, I)) / |batch|`
    SumThenAverage,
}

/// Scales `g` by `1 / max(1, ‖g‖₂ / R)`.
pub fn clip_gradient(g: &GradientSet, spec: &ClipSpec) -> Result<GradientSet> {
    if !g.is_finite() {
        return Err(Error::NonFinite("gradient to clip"));
    }
    let norm = g.global_l2_norm();
    let divisor = (norm / spec.bound).max(1.0);
    if divisor == 1.0 {
        return Ok(g.clone());
    }
    Ok(g.scaled(1.0 / divisor))
}

/// Independent `N(0, scale²)` draws for every coordinate, tensor by tensor
/// in the given order.
pub fn gaussian_noise<R: Rng + ?Sized>(
    shapes: &[Vec<usize>],
    scale: f64,
    rng: &mut R,
) -> Result<GradientSet> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be non-negative and finite, got {scale}"
        )));
    }
    let tensors = shapes
        .iter()
        .map(|shape| {
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = scale * z;
            }
            t
        })
        .collect();
    Ok(GradientSet::new(tensors))
}

/// Clips every per-sample gradient and combines them with Gaussian noise of
/// standard deviation `σ·R` according to `mode`.
///
/// The sum over samples runs in list order.
pub fn aggregate_noisy<R: Rng + ?Sized>(
    per_sample: &[GradientSet],
    clip: &ClipSpec,
    noise: &NoiseSpec,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<GradientSet> {
    let first = per_sample.first().ok_or(Error::EmptyBatch)?;
    let mut sum = GradientSet::zeros_like(first);
    for g in per_sample {
        if !g.is_aligned_with(first) {
            return Err(Error::ShapeMismatch {
                op: "aggregate_noisy",
                lhs: vec![first.numel()],
                rhs: vec![g.numel()],
            });
        }
        sum.add_assign(&clip_gradient(g, clip)?)?;
    }
    let batch = per_sample.len() as f64;
    let noise = gaussian_noise(&first.shapes(), noise.sigma * clip.bound, rng)?;
    match mode {
        NoiseMode::AverageThenNoise => {
            sum.scale(1.0 / batch);
            sum.add_assign(&noise)?;
        }
        NoiseMode::SumThenAverage => {
            sum.add_assign(&noise)?;
            sum.scale(1.0 / batch);
        }
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gs(values: &[f64]) -> GradientSet {
        GradientSet::new(vec![Tensor::vector(values.to_vec())])
    }

    #[test]
    fn clip_below_bound_is_identity() {
        let g = gs(&[0.3, 0.4]);
        assert_eq!(clip_gradient(&g, &ClipSpec::new(1.0).unwrap()).unwrap(), g);
    }

    #[test]
    fn clip_at_bound_is_identity() {
        let g = gs(&[3.0, 4.0]);
        assert_eq!(clip_gradient(&g, &ClipSpec::new(5.0).unwrap()).unwrap(), g);
    }

    #[test]
    fn clip_scales_to_bound() {
        let out = clip_gradient(&gs(&[3.0, 4.0]), &ClipSpec::new(1.0).unwrap()).unwrap();
        let v = out.to_flat();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_rejects_non_finite() {
        let g = gs(&[f64::NAN]);
        assert!(clip_gradient(&g, &ClipSpec::new(1.0).unwrap()).is_err());
        assert!(ClipSpec::new(0.0).is_err());
        assert!(ClipSpec::new(f64::INFINITY).is_err());
    }

    #[test]
    fn zero_scale_noise_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = gaussian_noise(&[vec![3], vec![2, 2]], 0.0, &mut rng).unwrap();
        assert!(n.values().all(|v| v == 0.0));
    }

    #[test]
    fn negative_scale_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(gaussian_noise(&[vec![3]], -1.0, &mut rng).is_err());
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let a = gaussian_noise(&[vec![5]], 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gaussian_noise(&[vec![5]], 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_aggregate_is_mean_of_clipped() {
        let clip = ClipSpec::new(1.0).unwrap();
        let noise = NoiseSpec::new(0.0, 0).unwrap();
        let batch = vec![gs(&[3.0, 4.0]), gs(&[0.1, 0.2])];
        for mode in [NoiseMode::AverageThenNoise, NoiseMode::SumThenAverage] {
            let out = aggregate_noisy(
                &batch,
                &clip,
                &noise,
                mode,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap()
            .to_flat();
            assert!((out[0] - (0.6 + 0.1) / 2.0).abs() < 1e-15);
            assert!((out[1] - (0.8 + 0.2) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_unclipped_sample_passes_through() {
        let clip = ClipSpec::new(1.0).unwrap();
        let noise = NoiseSpec::new(0.0, 0).unwrap();
        let g = gs(&[0.5, -0.25]);
        let out = aggregate_noisy(
            std::slice::from_ref(&g),
            &clip,
            &noise,
            NoiseMode::AverageThenNoise,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn identical_oversized_gradients_average_to_bound() {
        let r = 0.8;
        let clip = ClipSpec::new(r).unwrap();
        let noise = NoiseSpec::new(0.0, 0).unwrap();
        // norm 2R along (0.6, 0.8)
        let g = gs(&[2.0 * r * 0.6, 2.0 * r * 0.8]);
        let batch = vec![g.clone(), g.clone(), g.clone(), g];
        let out = aggregate_noisy(
            &batch,
            &clip,
            &noise,
            NoiseMode::AverageThenNoise,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
        .to_flat();
        assert!((out[0] - r * 0.6).abs() < 1e-15);
        assert!((out[1] - r * 0.8).abs() < 1e-15);
    }

    #[test]
    fn empty_and_misaligned_batches() {
        let clip = ClipSpec::new(1.0).unwrap();
        let noise = NoiseSpec::new(1.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            aggregate_noisy(&[], &clip, &noise, NoiseMode::AverageThenNoise, &mut rng).unwrap_err(),
            Error::EmptyBatch
        );
        let bad = vec![gs(&[1.0]), gs(&[1.0, 2.0])];
        assert!(matches!(
            aggregate_noisy(&bad, &clip, &noise, NoiseMode::AverageThenNoise, &mut rng),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
