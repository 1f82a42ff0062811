//! Run configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! data = synthetic          # or a path to a label,f0,... CSV
//! synthetic_n = 2000
//! layers = 16, 16, 1
//! privacy = target_eps
//! target_eps = 10
//! ```
//!
//! Relative paths resolve against the config file's directory. Unknown or
//! repeated keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::DEFAULT_DELTA;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::mechanisms::NoiseMode;
use crate::model::NormKind;
use crate::optim::{AdamConfig, AdamVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PrivacyMode {
    /// Plain mini-batch Adam, no accounting.
    Off,
    /// Calibrate σ up front so the planned steps end at `epsilon`.
    TargetEpsilon {
        epsilon: f64,
        delta: f64,
    },
    FixedSigma {
        sigma: f64,
        delta: f64,
    },
}

impl PrivacyMode {
    pub fn delta(&self) -> Option<f64> {
        match self {
            PrivacyMode::Off => None,
            PrivacyMode::TargetEpsilon { delta, .. } | PrivacyMode::FixedSigma { delta, .. } => {
                Some(*delta)
            }
        }
    }
}

/// Independent seeds for the four sources of randomness in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub model: u64,
    pub shuffle: u64,
    pub poisson: u64,
    pub noise: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RunSeeds {
    /// Derives four distinct streams from one base seed.
    pub fn from_base(seed: u64) -> Self {
        Self {
            model: seed,
            shuffle: splitmix64(seed ^ 0x5348_5546),
            poisson: splitmix64(seed ^ 0x504F_4953),
            noise: splitmix64(seed ^ 0x4E4F_4953),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub test_data: Option<PathBuf>,
    /// Share of the non-test rows used for validation.
    pub valid_fraction: f64,
    /// Share of all rows held out for testing when `test_data` is absent.
    pub test_fraction: f64,
    /// Layer widths after the input layer; the last must be 1.
    pub layers: Vec<usize>,
    pub norm: NormKind,
    pub freeze_prefix: usize,
    pub epochs: usize,
    /// Expected Poisson batch size; the sampling rate is `batch_size / n`.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub privacy: PrivacyMode,
    /// Stop before the cumulative ε would exceed this.
    pub budget_eps: Option<f64>,
    pub seed: u64,
    pub seeds: RunSeeds,
    pub adam: AdamConfig,
    pub noise_mode: NoiseMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticSpec {
                n: 2000,
                dim: 20,
                separation: 3.0,
                label_noise: 0.0,
                seed: 0,
            }),
            test_data: None,
            valid_fraction: 0.2,
            test_fraction: 0.1,
            layers: vec![16, 16, 1],
            norm: NormKind::None,
            freeze_prefix: 0,
            epochs: 30,
            batch_size: 32,
            clip_norm: 1.0,
            privacy: PrivacyMode::Off,
            budget_eps: None,
            seed: 0,
            seeds: RunSeeds::from_base(0),
            adam: AdamConfig::default(),
            noise_mode: NoiseMode::AverageThenNoise,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad(format!(
                "valid_fraction {} not in [0, 1)",
                self.valid_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!(
                "test_fraction {} not in [0, 1)",
                self.test_fraction
            ));
        }
        if self.layers.is_empty() || self.layers.last() != Some(&1) {
            return bad("layers must end with 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip_norm {}", self.clip_norm));
        }
        let delta_ok = |d: f64| d > 0.0 && d < 1.0;
        match self.privacy {
            PrivacyMode::Off => {}
            PrivacyMode::TargetEpsilon { epsilon, delta } => {
                if !(epsilon > 0.0 && epsilon.is_finite()) || !delta_ok(delta) {
                    return bad(format!("target_eps {epsilon} / delta {delta}"));
                }
            }
            PrivacyMode::FixedSigma { sigma, delta } => {
                if !(sigma > 0.0 && sigma.is_finite()) || !delta_ok(delta) {
                    return bad(format!("sigma {sigma} / delta {delta}"));
                }
            }
        }
        if let Some(b) = self.budget_eps {
            if b.is_nan() || b < 0.0 {
                return bad(format!("budget_eps {b}"));
            }
        }
        self.adam
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Axes of a privacy/utility sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    /// Target ε values; `f64::INFINITY` means a non-private run.
    pub target_eps: Vec<f64>,
    pub clip_norms: Vec<f64>,
    pub freeze_prefixes: Vec<usize>,
    /// Base seeds; each expands through [`RunSeeds::from_base`].
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    /// ε ∈ {1, 2, 10, 100, 1000} × clip ∈ {1, 0.8, 0.6, 0.4}, no frozen prefix.
    pub fn reference(seeds: Vec<u64>) -> Self {
        Self {
            target_eps: vec![1.0, 2.0, 10.0, 100.0, 1000.0],
            clip_norms: vec![1.0, 0.8, 0.6, 0.4],
            freeze_prefixes: vec![0],
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_eps.is_empty()
            || self.clip_norms.is_empty()
            || self.freeze_prefixes.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::Config(
                "every sweep axis needs at least one value".into(),
            ));
        }
        Ok(())
    }
}

/// A parsed config file: the base run plus optional sweep axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub run: RunConfig,
    pub sweep: Option<SweepGrid>,
}

const KEYS: &[&str] = &[
    "data",
    "test_data",
    "synthetic_n",
    "synthetic_dim",
    "synthetic_separation",
    "synthetic_label_noise",
    "data_seed",
    "valid_fraction",
    "test_fraction",
    "layers",
    "norm",
    "freeze_prefix",
    "lr",
    "epochs",
    "batch_size",
    "clip_norm",
    "privacy",
    "target_eps",
    "sigma",
    "delta",
    "budget_eps",
    "seed",
    "model_seed",
    "shuffle_seed",
    "poisson_seed",
    "noise_seed",
    "variant",
    "bias_correction",
    "beta1",
    "beta2",
    "adam_stabilizer",
    "noise_mode",
    "sweep_eps",
    "sweep_clip",
    "sweep_freeze",
    "sweep_seeds",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("line {line}: cannot parse `{v}` for `{key}`"))),
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::Config(format!(
                            "line {line}: bad list item `{}` for `{key}`",
                            s.trim()
                        ))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

fn parse_eps(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" | "off" | "none" => Some(f64::INFINITY),
        other => other.parse().ok(),
    }
}

/// Parses config text; relative paths are resolved against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ConfigFile> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {line_no}: expected `key = value`"
            )));
        };
        let key = k.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "line {line_no}: unknown key `{key}`"
            )));
        }
        if map
            .insert(key.clone(), (line_no, v.trim().to_string()))
            .is_some()
        {
            return Err(Error::Config(format!(
                "line {line_no}: duplicate key `{key}`"
            )));
        }
    }
    let mut e = Entries { map };
    let mut run = RunConfig::default();
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base_dir.join(p)
        }
    };

    let mut synth = match run.data {
        DataSource::Synthetic(s) => s,
        DataSource::Csv { .. } => unreachable!(),
    };
    synth.n = e.parse("synthetic_n")?.unwrap_or(synth.n);
    synth.dim = e.parse("synthetic_dim")?.unwrap_or(synth.dim);
    synth.separation = e.parse("synthetic_separation")?.unwrap_or(synth.separation);
    synth.label_noise = e
        .parse("synthetic_label_noise")?
        .unwrap_or(synth.label_noise);
    synth.seed = e.parse("data_seed")?.unwrap_or(synth.seed);
    run.data = match e.take("data") {
        None => DataSource::Synthetic(synth),
        Some((_, v)) if v == "synthetic" => DataSource::Synthetic(synth),
        Some((_, v)) => DataSource::Csv { path: resolve(&v) },
    };
    run.test_data = e.take("test_data").map(|(_, v)| resolve(&v));
    run.valid_fraction = e.parse("valid_fraction")?.unwrap_or(run.valid_fraction);
    run.test_fraction = e.parse("test_fraction")?.unwrap_or(run.test_fraction);
    run.layers = e.list("layers")?.unwrap_or(run.layers);
    if let Some((line, v)) = e.take("norm") {
        run.norm = match v.as_str() {
            "none" => NormKind::None,
            g => match g.strip_prefix("group:").and_then(|n| n.trim().parse().ok()) {
                Some(groups) => NormKind::Group { groups },
                None => {
                    return Err(Error::Config(format!(
                        "line {line}: norm must be `none` or `group:<k>`"
                    )))
                }
            },
        };
    }
    run.freeze_prefix = e.parse("freeze_prefix")?.unwrap_or(0);
    run.adam.lr = e.parse("lr")?.unwrap_or(run.adam.lr);
    run.epochs = e.parse("epochs")?.unwrap_or(run.epochs);
    run.batch_size = e.parse("batch_size")?.unwrap_or(run.batch_size);
    run.clip_norm = e.parse("clip_norm")?.unwrap_or(run.clip_norm);

    let delta = e.parse("delta")?.unwrap_or(DEFAULT_DELTA);
    let target: Option<f64> = e.parse("target_eps")?;
    let sigma: Option<f64> = e.parse("sigma")?;
    run.privacy = match e.take("privacy") {
        None => match (target, sigma) {
            (Some(epsilon), _) => PrivacyMode::TargetEpsilon { epsilon, delta },
            (None, Some(sigma)) => PrivacyMode::FixedSigma { sigma, delta },
            (None, None) => PrivacyMode::Off,
        },
        Some((line, mode)) => match mode.as_str() {
            "off" => PrivacyMode::Off,
            "target_eps" => PrivacyMode::TargetEpsilon {
                epsilon: target.ok_or_else(|| {
                    Error::Config(format!(
                        "line {line}: privacy = target_eps needs target_eps"
                    ))
                })?,
                delta,
            },
            "fixed_sigma" => PrivacyMode::FixedSigma {
                sigma: sigma.ok_or_else(|| {
                    Error::Config(format!("line {line}: privacy = fixed_sigma needs sigma"))
                })?,
                delta,
            },
            other => {
                return Err(Error::Config(format!(
                    "line {line}: privacy must be off, target_eps or fixed_sigma, got `{other}`"
                )))
            }
        },
    };
    run.budget_eps = e.parse("budget_eps")?;

    run.seed = e.parse("seed")?.unwrap_or(0);
    let mut seeds = RunSeeds::from_base(run.seed);
    seeds.model = e.parse("model_seed")?.unwrap_or(seeds.model);
    seeds.shuffle = e.parse("shuffle_seed")?.unwrap_or(seeds.shuffle);
    seeds.poisson = e.parse("poisson_seed")?.unwrap_or(seeds.poisson);
    seeds.noise = e.parse("noise_seed")?.unwrap_or(seeds.noise);
    run.seeds = seeds;

    if let Some((line, v)) = e.take("variant") {
        run.adam.variant = match v.as_str() {
            "standard" => AdamVariant::Standard,
            "linear" => AdamVariant::Linear,
            _ => {
                return Err(Error::Config(format!(
                    "line {line}: variant must be standard or linear"
                )))
            }
        };
    }
    run.adam.bias_correction = e
        .parse("bias_correction")?
        .unwrap_or(run.adam.bias_correction);
    run.adam.beta1 = e.parse("beta1")?.unwrap_or(run.adam.beta1);
    run.adam.beta2 = e.parse("beta2")?.unwrap_or(run.adam.beta2);
    run.adam.stabilizer = e.parse("adam_stabilizer")?.unwrap_or(run.adam.stabilizer);
    if let Some((line, v)) = e.take("noise_mode") {
        run.noise_mode = match v.as_str() {
            "average_then_noise" => NoiseMode::AverageThenNoise,
            "sum_then_average" => NoiseMode::SumThenAverage,
            _ => {
                return Err(Error::Config(format!(
                    "line {line}: noise_mode must be average_then_noise or sum_then_average"
                )))
            }
        };
    }

    let sweep_eps = match e.take("sweep_eps") {
        None => None,
        Some((line, v)) => Some(
            v.split(',')
                .map(|s| {
                    parse_eps(s).ok_or_else(|| {
                        Error::Config(format!("line {line}: bad sweep_eps item `{}`", s.trim()))
                    })
                })
                .collect::<Result<Vec<f64>>>()?,
        ),
    };
    let sweep_clip: Option<Vec<f64>> = e.list("sweep_clip")?;
    let sweep_freeze: Option<Vec<usize>> = e.list("sweep_freeze")?;
    let sweep_seeds: Option<Vec<u64>> = e.list("sweep_seeds")?;
    let sweep = if sweep_eps.is_some()
        || sweep_clip.is_some()
        || sweep_freeze.is_some()
        || sweep_seeds.is_some()
    {
        let grid = SweepGrid {
            target_eps: sweep_eps.unwrap_or_else(|| match run.privacy {
                PrivacyMode::TargetEpsilon { epsilon, .. } => vec![epsilon],
                _ => vec![f64::INFINITY],
            }),
            clip_norms: sweep_clip.unwrap_or_else(|| vec![run.clip_norm]),
            freeze_prefixes: sweep_freeze.unwrap_or_else(|| vec![run.freeze_prefix]),
            seeds: sweep_seeds.unwrap_or_else(|| vec![run.seed]),
        };
        grid.validate()?;
        Some(grid)
    } else {
        None
    };

    debug_assert!(e.map.is_empty());
    run.validate()?;
    Ok(ConfigFile { run, sweep })
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}
