//! CSV and JSON report output.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PrivacyMode, TrainReport};
use crate::error::{Error, Result};

/// Report CSV header, in column order.
pub const REPORT_COLUMNS: [&str; 14] = [
    "run_id",
    "seed",
    "target_eps",
    "sigma",
    "achieved_eps",
    "delta",
    "clip_norm",
    "freeze_prefix",
    "epochs_run",
    "stop_reason",
    "train_loss_final",
    "valid_acc",
    "test_acc",
    "wall_clock_s",
];

/// One report line. Field order is the CSV column order.
///
/// `target_eps` is `inf` for non-private runs; `seed` holds `median` on
/// aggregate rows; empty cells mean "not applicable".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub seed: String,
    pub target_eps: f64,
    pub sigma: Option<f64>,
    pub achieved_eps: Option<f64>,
    pub delta: Option<f64>,
    pub clip_norm: f64,
    pub freeze_prefix: usize,
    pub epochs_run: usize,
    pub stop_reason: String,
    pub train_loss_final: Option<f64>,
    pub valid_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub wall_clock_s: f64,
}

fn finite(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

impl ReportRow {
    pub fn from_report(run_id: impl Into<String>, r: &TrainReport) -> Self {
        let cfg = &r.config;
        let target_eps = match cfg.privacy {
            PrivacyMode::TargetEpsilon { epsilon, .. } => epsilon,
            PrivacyMode::Off | PrivacyMode::FixedSigma { .. } => f64::INFINITY,
        };
        Self {
            run_id: run_id.into(),
            seed: cfg.seed.to_string(),
            target_eps,
            sigma: r.sigma,
            achieved_eps: r.epsilon(),
            delta: cfg.privacy.delta(),
            clip_norm: cfg.clip_norm,
            freeze_prefix: cfg.freeze_prefix,
            epochs_run: r.epochs.len(),
            stop_reason: r.stop_reason.as_str().to_string(),
            train_loss_final: finite(r.train_loss_final()),
            valid_acc: finite(r.valid_acc),
            test_acc: r.test_acc,
            wall_clock_s: r.wall_clock_s,
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(REPORT_COLUMNS).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses CSV produced by [`write_report_csv`], checking the header.
pub fn read_report_csv<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?;
    if !header.iter().eq(REPORT_COLUMNS.iter().copied()) {
        return Err(Error::Io(format!("unexpected report header: {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Per-epoch trace: `epoch,steps,train_loss,valid_acc,epsilon`.
pub fn write_epochs_csv<W: Write>(report: &TrainReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in &report.epochs {
        w.serialize(e).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a super::RunConfig,
    sigma: Option<f64>,
    privacy: Option<crate::accountant::PrivacySpent>,
    accuracy: Accuracy,
    stop_reason: super::StopReason,
    steps_run: u64,
    wall_clock_s: f64,
}

#[derive(Serialize)]
struct Accuracy {
    valid: Option<f64>,
    test: Option<f64>,
}

/// JSON summary: config echo, privacy spent and accuracies.
pub fn summary_json(report: &TrainReport) -> Result<String> {
    let s = Summary {
        config: &report.config,
        sigma: report.sigma,
        privacy: report.privacy,
        accuracy: Accuracy {
            valid: finite(report.valid_acc),
            test: report.test_acc,
        },
        stop_reason: report.stop_reason,
        steps_run: report.steps_run,
        wall_clock_s: report.wall_clock_s,
    };
    serde_json::to_string_pretty(&s).map_err(|e| Error::Io(e.to_string()))
}

/// Writes `report.csv`, `epochs.csv` and `summary.json` into `dir`.
pub fn write_run_outputs(report: &TrainReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let row = ReportRow::from_report("0", report);
    write_report_csv(&[row], std::fs::File::create(dir.join("report.csv"))?)?;
    write_epochs_csv(report, std::fs::File::create(dir.join("epochs.csv"))?)?;
    std::fs::write(dir.join("summary.json"), summary_json(report)? + "\n")?;
    Ok(())
}
