//! Privacy/utility sweeps over (ε, R, freeze prefix, seed).

use rayon::prelude::*;

use super::report::ReportRow;
use super::{train, PrivacyMode, RunConfig, RunSeeds, SweepGrid, TrainReport};
use crate::accountant::DEFAULT_DELTA;
use crate::error::Result;

/// Config for one grid point; `target_eps = ∞` turns privacy off.
pub fn cell_config(
    base: &RunConfig,
    target_eps: f64,
    clip: f64,
    freeze: usize,
    seed: u64,
) -> RunConfig {
    let delta = base.privacy.delta().unwrap_or(DEFAULT_DELTA);
    RunConfig {
        privacy: if target_eps.is_finite() {
            PrivacyMode::TargetEpsilon {
                epsilon: target_eps,
                delta,
            }
        } else {
            PrivacyMode::Off
        },
        clip_norm: clip,
        freeze_prefix: freeze,
        seed,
        seeds: RunSeeds::from_base(seed),
        ..base.clone()
    }
}

/// Every grid point's config, ε-major, seeds innermost.
pub fn expand_grid(grid: &SweepGrid, base: &RunConfig) -> Vec<RunConfig> {
    let mut out = Vec::new();
    for &eps in &grid.target_eps {
        for &clip in &grid.clip_norms {
            for &freeze in &grid.freeze_prefixes {
                for &seed in &grid.seeds {
                    out.push(cell_config(base, eps, clip, freeze, seed));
                }
            }
        }
    }
    out
}

/// Runs every grid point (in parallel) and returns the reports in grid
/// order. Failures stay in place as errors.
pub fn sweep_with_data(
    grid: &SweepGrid,
    base: &RunConfig,
) -> Result<Vec<(RunConfig, Result<TrainReport>)>> {
    grid.validate()?;
    let configs = expand_grid(grid, base);
    Ok(configs
        .into_par_iter()
        .map(|cfg| {
            let r = train(&cfg);
            (cfg, r)
        })
        .collect())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    v.retain(|x| !x.is_nan());
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

fn median_of(rows: &[&ReportRow], f: impl Fn(&ReportRow) -> Option<f64>) -> Option<f64> {
    median(rows.iter().filter_map(|r| f(r)).collect())
}

fn median_row(cell: usize, rows: &[&ReportRow]) -> ReportRow {
    let first = rows[0];
    let ok: Vec<&ReportRow> = rows
        .iter()
        .copied()
        .filter(|r| !r.stop_reason.starts_with("error"))
        .collect();
    ReportRow {
        run_id: format!("cell{cell}-median"),
        seed: "median".into(),
        target_eps: first.target_eps,
        sigma: median_of(&ok, |r| r.sigma),
        achieved_eps: median_of(&ok, |r| r.achieved_eps),
        delta: first.delta,
        clip_norm: first.clip_norm,
        freeze_prefix: first.freeze_prefix,
        epochs_run: median_of(&ok, |r| Some(r.epochs_run as f64)).map_or(0, |m| m.round() as usize),
        stop_reason: "median".into(),
        train_loss_final: median_of(&ok, |r| r.train_loss_final),
        valid_acc: median_of(&ok, |r| r.valid_acc),
        test_acc: median_of(&ok, |r| r.test_acc),
        wall_clock_s: median_of(&ok, |r| Some(r.wall_clock_s)).unwrap_or(0.0),
    }
}

/// Runs the grid and returns one row per run followed by a median row for
/// each (ε, R, freeze prefix) cell.
///
/// A failing run becomes a row whose `stop_reason` starts with `error:`.
pub fn sweep(grid: &SweepGrid, base: &RunConfig) -> Result<Vec<ReportRow>> {
    let results = sweep_with_data(grid, base)?;
    let per_cell = grid.seeds.len();
    let mut rows = Vec::with_capacity(results.len() + results.len() / per_cell);
    for (i, (cfg, res)) in results.iter().enumerate() {
        rows.push(match res {
            Ok(report) => ReportRow::from_report(i.to_string(), report),
            Err(e) => error_row(i, cfg, &e.to_string()),
        });
    }
    let cells = rows.len() / per_cell;
    for c in 0..cells {
        let members: Vec<&ReportRow> = rows[c * per_cell..(c + 1) * per_cell].iter().collect();
        let m = median_row(c, &members);
        rows.push(m);
    }
    Ok(rows)
}

fn error_row(i: usize, cfg: &RunConfig, msg: &str) -> ReportRow {
    let target_eps = match cfg.privacy {
        PrivacyMode::TargetEpsilon { epsilon, .. } => epsilon,
        _ => f64::INFINITY,
    };
    ReportRow {
        run_id: i.to_string(),
        seed: cfg.seed.to_string(),
        target_eps,
        sigma: None,
        achieved_eps: None,
        delta: cfg.privacy.delta(),
        clip_norm: cfg.clip_norm,
        freeze_prefix: cfg.freeze_prefix,
        epochs_run: 0,
        stop_reason: format!("error: {msg}"),
        train_loss_final: None,
        valid_acc: None,
        test_acc: None,
        wall_clock_s: 0.0,
    }
}
