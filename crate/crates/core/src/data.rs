//! Binary-labelled datasets: CSV ingestion and a synthetic two-blob task.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major features with one 0/1 label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature values do not fit {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::InvalidArgument(format!("label {bad} is not 0 or 1")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Features as a `[n, dim]` tensor.
    pub fn feature_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), self.dim], self.features.clone())
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            dim: self.dim,
            features,
            labels,
        }
    }

    /// Shifts and scales each column to mean 0 and (population) std 1;
    /// constant columns become 0.
    pub fn standardize(&mut self) {
        let n = self.len();
        if n == 0 {
            return;
        }
        for c in 0..self.dim {
            let col = || (0..n).map(|r| self.features[r * self.dim + c]);
            let mean = col().sum::<f64>() / n as f64;
            let var = col().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            for r in 0..n {
                let v = &mut self.features[r * self.dim + c];
                *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
            }
        }
    }

    /// Writes `label,f0,...` CSV using shortest round-trip float formatting.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim).map(|i| format!("f{i}")));
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut rec = vec![self.labels[i].to_string()];
            rec.extend(self.row(i).iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Parses `label,f0,f1,...` CSV text (without standardizing).
pub fn parse_csv_dataset(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Dataset {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(Error::Dataset {
            line: 1,
            message: "empty file".into(),
        });
    }
    if header.get(0) != Some("label") {
        return Err(Error::Dataset {
            line: 1,
            message: "first column must be `label`".into(),
        });
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{i}") {
            return Err(Error::Dataset {
                line: 1,
                message: format!("expected column f{i}, found `{name}`"),
            });
        }
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(Error::Dataset {
            line: 1,
            message: "no feature columns".into(),
        });
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Dataset {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != dim + 1 {
            return Err(Error::Dataset {
                line,
                message: format!("expected {} fields, found {}", dim + 1, rec.len()),
            });
        }
        let label = match rec.get(0) {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(Error::Dataset {
                    line,
                    message: format!("label must be 0 or 1, found {:?}", other.unwrap_or("")),
                })
            }
        };
        labels.push(label);
        for field in rec.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::Dataset {
                line,
                message: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Dataset {
                    line,
                    message: format!("`{field}` is not finite"),
                });
            }
            features.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Dataset {
            line: 2,
            message: "no data rows".into(),
        });
    }
    Dataset::new(dim, features, labels)
}

/// Loads and standardizes a CSV dataset; row order is preserved.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(Error::Dataset {
            line: 1,
            message: "empty file".into(),
        });
    }
    let mut ds = parse_csv_dataset(&text)?;
    ds.standardize();
    Ok(ds)
}

/// Parameters of the two-blob synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub separation: f64,
    pub label_noise: f64,
    pub seed: u64,
}

/// Two unit-covariance Gaussian blobs centred at `±(separation/2)·e₁`.
///
/// Labels alternate 0/1 (balanced); then `round(label_noise·n)` randomly
/// chosen labels are flipped.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec {
        n,
        dim,
        separation,
        label_noise,
        seed,
    } = *spec;
    if n < 2 || dim < 1 {
        return Err(Error::InvalidArgument(format!(
            "need n >= 2 and dim >= 1, got n = {n}, dim = {dim}"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!("separation {separation}")));
    }
    if !(0.0..0.5).contains(&label_noise) {
        return Err(Error::InvalidArgument(format!(
            "label noise must be in [0, 0.5), got {label_noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 2) as u8;
        let centre = if y == 1 {
            separation / 2.0
        } else {
            -separation / 2.0
        };
        for d in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            features.push(if d == 0 { centre + z } else { z });
        }
        labels.push(y);
    }
    let flips = (label_noise * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in &order[..flips] {
        labels[i] = 1 - labels[i];
    }
    Dataset::new(dim, features, labels)
}
