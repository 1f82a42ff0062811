//! Experiment harness: data preparation, the training loop with budget
//! early stopping, sweeps, and report output.

mod config;
mod report;
mod sweep;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    load_config, parse_config, ConfigFile, DataSource, PrivacyMode, RunConfig, RunSeeds, SweepGrid,
};
pub use report::summary_json;
pub use report::{
    read_report_csv, write_epochs_csv, write_report_csv, write_run_outputs, ReportRow,
    REPORT_COLUMNS,
};
pub use sweep::{cell_config, expand_grid, sweep, sweep_with_data};

use crate::accountant::{calibrate_sigma, PrivacyLedger, PrivacySpent};
use crate::data::{load_csv_dataset, synthetic_dataset, Dataset};
use crate::error::{Error, Result};
use crate::mechanisms::{ClipSpec, NoiseSpec};
use crate::model::{build_mlp, Model};
use crate::optim::{adam_step, dp_adam_step, AdamState, DpStepConfig, StepOutcome};

/// Train / validation / test partitions of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Option<Dataset>,
}

/// Loads the configured data and splits it.
///
/// Rows are shuffled with the shuffle seed. Without a test file, a
/// `test_fraction` share is held out first; the remainder is split into
/// train and validation by `valid_fraction`.
pub fn prepare_data(cfg: &RunConfig) -> Result<Splits> {
    let full = match &cfg.data {
        DataSource::Csv { path } => load_csv_dataset(path)?,
        DataSource::Synthetic(spec) => synthetic_dataset(spec)?,
    };
    let external_test = match &cfg.test_data {
        Some(path) => {
            let t = load_csv_dataset(path)?;
            if t.dim() != full.dim() {
                return Err(Error::ShapeMismatch {
                    op: "test data",
                    lhs: vec![t.dim()],
                    rhs: vec![full.dim()],
                });
            }
            Some(t)
        }
        None => None,
    };
    split_dataset(&full, external_test, cfg)
}

/// Splits an in-memory dataset the same way [`prepare_data`] does.
pub fn split_dataset(full: &Dataset, test: Option<Dataset>, cfg: &RunConfig) -> Result<Splits> {
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle));
    let (test, rest) = match test {
        Some(t) => (Some(t), &order[..]),
        None => {
            let k = (cfg.test_fraction * full.len() as f64).round() as usize;
            let held = (k > 0).then(|| full.subset(&order[..k]));
            (held, &order[k..])
        }
    };
    let n_valid = (cfg.valid_fraction * rest.len() as f64).round() as usize;
    let (valid_idx, train_idx) = rest.split_at(n_valid);
    if train_idx.is_empty() {
        return Err(Error::Config("no rows left for training".into()));
    }
    Ok(Splits {
        train: full.subset(train_idx),
        valid: full.subset(valid_idx),
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochsExhausted,
    BudgetExceeded,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::EpochsExhausted => "epochs_exhausted",
            StopReason::BudgetExceeded => "budget_exceeded",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based; a budget stop mid-epoch still yields a record.
    pub epoch: usize,
    /// Steps taken so far, cumulative.
    pub steps: u64,
    /// Mean loss over the whole training split.
    pub train_loss: f64,
    pub valid_acc: f64,
    /// Cumulative ε; `None` when privacy is off.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: RunConfig,
    pub n_train: usize,
    pub sample_rate: f64,
    pub steps_per_epoch: u64,
    pub planned_steps: u64,
    pub steps_run: u64,
    /// Noise multiplier in use; `None` when privacy is off.
    pub sigma: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub privacy: Option<PrivacySpent>,
    pub valid_acc: f64,
    pub test_acc: Option<f64>,
    pub stop_reason: StopReason,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn train_loss_final(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.privacy.map(|p| p.epsilon)
    }

    /// Copy with the wall-clock field zeroed, for numeric comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }
}

/// Per-step notification passed to a training observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvent {
    pub epoch: usize,
    pub step: u64,
    pub outcome: StepOutcome,
    pub epsilon: Option<f64>,
}

/// Trains with the configured data.
pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    train_monitored(cfg, &mut |_| {})
}

/// Like [`train`], calling `observer` after every step.
pub fn train_monitored(
    cfg: &RunConfig,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<TrainReport> {
    cfg.validate()?;
    let splits = prepare_data(cfg)?;
    train_on(cfg, &splits, observer)
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

/// Trains on already prepared splits.
pub fn train_on(
    cfg: &RunConfig,
    splits: &Splits,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let train = &splits.train;
    let n = train.len();
    let sample_rate = (cfg.batch_size as f64 / n as f64).min(1.0);
    let spe = steps_per_epoch(n, cfg.batch_size);
    let planned_steps = spe * cfg.epochs as u64;

    let mut widths = vec![train.dim()];
    widths.extend_from_slice(&cfg.layers);
    let mut model = build_mlp(&widths, cfg.norm, cfg.seeds.model)?;
    model.set_freeze_prefix(cfg.freeze_prefix)?;
    if let Some(valid) = Some(&splits.valid).filter(|v| !v.is_empty()) {
        if valid.dim() != train.dim() {
            return Err(Error::ShapeMismatch {
                op: "validation data",
                lhs: vec![valid.dim()],
                rhs: vec![train.dim()],
            });
        }
    }

    let sigma = match cfg.privacy {
        PrivacyMode::Off => None,
        PrivacyMode::FixedSigma { sigma, .. } => Some(sigma),
        PrivacyMode::TargetEpsilon { epsilon, delta } => {
            Some(calibrate_sigma(epsilon, delta, sample_rate, planned_steps)?)
        }
    };

    let mut state = AdamState::new(&model);
    let mut ledger = PrivacyLedger::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle);
    let mut poisson_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.poisson);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.noise);
    let xs_train = train.feature_tensor()?;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut stop_reason = StopReason::EpochsExhausted;
    let mut step: u64 = 0;
    let mut spent: Option<PrivacySpent> = match (sigma, cfg.privacy.delta()) {
        (Some(_), Some(delta)) => Some(ledger.spent(delta)?),
        _ => None,
    };

    'outer: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if sigma.is_none() {
            order.shuffle(&mut shuffle_rng);
        }
        let mut stepped_this_epoch = false;
        for k in 0..spe as usize {
            let outcome = match (sigma, cfg.privacy.delta()) {
                (Some(sigma), Some(delta)) => {
                    if let Some(budget) = cfg.budget_eps {
                        let mut probe = ledger.clone();
                        probe.record(sigma, sample_rate)?;
                        if probe.spent(delta)?.epsilon > budget {
                            stop_reason = StopReason::BudgetExceeded;
                            if stepped_this_epoch || epochs.is_empty() {
                                epochs.push(epoch_record(
                                    &model, &xs_train, splits, epoch, step, spent,
                                )?);
                            }
                            break 'outer;
                        }
                    }
                    let dp = DpStepConfig {
                        clip: ClipSpec::new(cfg.clip_norm)?,
                        noise: NoiseSpec::new(sigma, cfg.seeds.noise)?,
                        sample_rate,
                        noise_mode: cfg.noise_mode,
                        adam: cfg.adam,
                    };
                    let out = dp_adam_step(
                        &mut model,
                        train,
                        &mut state,
                        &dp,
                        &mut ledger,
                        &mut poisson_rng,
                        &mut noise_rng,
                    )?;
                    spent = Some(ledger.spent(delta)?);
                    out
                }
                _ => {
                    let lo = k * cfg.batch_size;
                    let hi = (lo + cfg.batch_size).min(n);
                    reference_step(&mut model, train, &order[lo..hi], &mut state, cfg)?
                }
            };
            step += 1;
            stepped_this_epoch = true;
            observer(&StepEvent {
                epoch,
                step,
                outcome,
                epsilon: spent.map(|s| s.epsilon),
            });
        }
        epochs.push(epoch_record(&model, &xs_train, splits, epoch, step, spent)?);
    }

    let valid_acc = accuracy_on(&model, &splits.valid)?;
    let test_acc = match &splits.test {
        Some(t) if !t.is_empty() => Some(accuracy_on(&model, t)?),
        _ => None,
    };
    Ok(TrainReport {
        config: cfg.clone(),
        n_train: n,
        sample_rate,
        steps_per_epoch: spe,
        planned_steps,
        steps_run: step,
        sigma,
        epochs,
        privacy: spent,
        valid_acc,
        test_acc,
        stop_reason,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Non-private mini-batch Adam on the rows `batch`.
fn reference_step(
    model: &mut Model,
    data: &Dataset,
    batch: &[usize],
    state: &mut AdamState,
    cfg: &RunConfig,
) -> Result<StepOutcome> {
    let sub = data.subset(batch);
    let (loss, mut grad) = model.batch_gradient(&sub.feature_tensor()?, sub.labels())?;
    model.mask_frozen(&mut grad);
    let norm = grad.global_l2_norm();
    adam_step(model, &grad, state, &cfg.adam)?;
    Ok(StepOutcome {
        applied: true,
        batch_size: batch.len(),
        pre_clip_norm_min: norm,
        pre_clip_norm_mean: norm,
        pre_clip_norm_max: norm,
        post_clip_norm_max: norm,
        noisy_grad_norm: norm,
        mean_loss: loss,
    })
}

fn accuracy_on(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    model.accuracy(&data.feature_tensor()?, data.labels())
}

fn epoch_record(
    model: &Model,
    xs_train: &crate::tensor::Tensor,
    splits: &Splits,
    epoch: usize,
    steps: u64,
    spent: Option<PrivacySpent>,
) -> Result<EpochRecord> {
    let train_loss = model.loss_with_params(model.params(), xs_train, splits.train.labels())?;
    Ok(EpochRecord {
        epoch,
        steps,
        train_loss,
        valid_acc: accuracy_on(model, &splits.valid)?,
        epsilon: spent.map(|s| s.epsilon),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn small(privacy: PrivacyMode) -> RunConfig {
        RunConfig {
            data: DataSource::Synthetic(SyntheticSpec {
                n: 200,
                dim: 3,
                separation: 4.0,
                label_noise: 0.0,
                seed: 1,
            }),
            layers: vec![4, 1],
            epochs: 2,
            batch_size: 16,
            privacy,
            ..RunConfig::default()
        }
    }

    #[test]
    fn splits_partition_rows() {
        let cfg = small(PrivacyMode::Off);
        let s = prepare_data(&cfg).unwrap();
        assert_eq!(s.test.as_ref().unwrap().len(), 20);
        assert_eq!(s.valid.len(), 36);
        assert_eq!(s.train.len(), 144);
    }

    #[test]
    fn non_private_run_has_no_epsilon() {
        let r = train(&small(PrivacyMode::Off)).unwrap();
        assert_eq!(r.steps_per_epoch, 9);
        assert_eq!(r.steps_run, 18);
        assert!(r.privacy.is_none() && r.sigma.is_none());
        assert!(r.epochs.iter().all(|e| e.epsilon.is_none()));
        assert_eq!(r.stop_reason, StopReason::EpochsExhausted);
    }

    #[test]
    fn private_run_reports_monotone_epsilon() {
        let r = train(&small(PrivacyMode::TargetEpsilon {
            epsilon: 5.0,
            delta: 1e-5,
        }))
        .unwrap();
        let eps: Vec<f64> = r.epochs.iter().map(|e| e.epsilon.unwrap()).collect();
        assert!(eps.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.epsilon().unwrap() <= 5.0);
    }

    #[test]
    fn observer_sees_every_step() {
        let mut seen = 0;
        let r = train_monitored(
            &small(PrivacyMode::FixedSigma {
                sigma: 1.0,
                delta: 1e-5,
            }),
            &mut |ev| {
                seen += 1;
                assert_eq!(ev.step, seen);
                assert!(ev.epsilon.is_some());
            },
        )
        .unwrap();
        assert_eq!(seen, r.steps_run);
    }
}
