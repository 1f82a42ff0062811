//! Command-line front end: training runs, sweeps, accountant queries and
//! synthetic data generation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpadam::accountant::{answer_query, calibrate_sigma, AccountantQuery, DEFAULT_DELTA};
use dpadam::data::{synthetic_dataset, SyntheticSpec};
use dpadam::harness::{
    load_config, summary_json, sweep, train_monitored, write_report_csv, write_run_outputs,
    ConfigFile, PrivacyMode, SweepGrid,
};
use dpadam::Error;

#[derive(Parser)]
#[command(
    name = "dpadam",
    version,
    about = "Differentially private Adam training toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config file.
    Train {
        config: PathBuf,
        /// Directory for report.csv, epochs.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print ε and loss after every step on stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Run the sweep described by a config file's sweep_* keys.
    Sweep {
        config: PathBuf,
        /// Directory for report.csv; CSV goes to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Privacy spent by a subsampled Gaussian mechanism, or the σ for a target ε.
    Accountant(AccountantArgs),
    /// Write a synthetic two-blob dataset as CSV.
    GenData {
        /// Comma-separated `key=value` list: n, dim, separation, label_noise, seed.
        spec: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AccountantArgs {
    #[arg(long, conflicts_with_all = ["target_eps", "query"])]
    sigma: Option<f64>,
    /// Calibrate σ for this ε instead of reporting ε for a given σ.
    #[arg(long, conflicts_with = "query")]
    target_eps: Option<f64>,
    #[arg(long, required_unless_present = "query")]
    q: Option<f64>,
    #[arg(long, required_unless_present = "query")]
    steps: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Read `{sigma, q, steps, delta}` JSON from a file.
    #[arg(long)]
    query: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load(path: &Path) -> Result<ConfigFile, Failure> {
    load_config(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Prints to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(runtime(e)),
        _ => Ok(()),
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train {
            config,
            out,
            verbose,
        } => {
            let file = load(&config)?;
            let report = train_monitored(&file.run, &mut |ev| {
                if verbose {
                    let eps = ev.epsilon.map_or("-".to_string(), |e| format!("{e:.4}"));
                    eprintln!(
                        "epoch {} step {} batch {} loss {:.5} eps {eps}",
                        ev.epoch, ev.step, ev.outcome.batch_size, ev.outcome.mean_loss
                    );
                }
            })
            .map_err(runtime)?;
            match out {
                Some(dir) => write_run_outputs(&report, &dir).map_err(runtime)?,
                None => emit(&summary_json(&report).map_err(runtime)?)?,
            }
            Ok(())
        }
        Command::Sweep { config, out } => {
            let file = load(&config)?;
            let grid = file.sweep.unwrap_or_else(|| SweepGrid {
                target_eps: vec![match file.run.privacy {
                    PrivacyMode::TargetEpsilon { epsilon, .. } => epsilon,
                    _ => f64::INFINITY,
                }],
                clip_norms: vec![file.run.clip_norm],
                freeze_prefixes: vec![file.run.freeze_prefix],
                seeds: vec![file.run.seed],
            });
            let rows = sweep(&grid, &file.run).map_err(runtime)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(runtime)?;
                    let f = std::fs::File::create(dir.join("report.csv")).map_err(runtime)?;
                    write_report_csv(&rows, f).map_err(runtime)?;
                }
                None => write_report_csv(&rows, std::io::stdout().lock()).map_err(runtime)?,
            }
            Ok(())
        }
        Command::Accountant(args) => accountant(args),
        Command::GenData { spec, out } => {
            let spec = parse_data_spec(&spec)?;
            let ds = synthetic_dataset(&spec)?;
            match out {
                Some(path) => ds.save_csv(&path).map_err(runtime)?,
                None => ds.write_csv(std::io::stdout().lock()).map_err(runtime)?,
            }
            Ok(())
        }
    }
}

fn accountant(args: AccountantArgs) -> Result<(), Failure> {
    let query = if let Some(path) = &args.query {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str::<AccountantQuery>(&text)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
    } else {
        let (q, steps) = (args.q.unwrap_or_default(), args.steps.unwrap_or_default());
        let sigma = match (args.sigma, args.target_eps) {
            (Some(s), None) => s,
            (None, Some(eps)) => calibrate_sigma(eps, args.delta, q, steps)?,
            _ => {
                return Err(Failure::Usage(
                    "give exactly one of --sigma or --target-eps".into(),
                ))
            }
        };
        AccountantQuery {
            sigma,
            q,
            steps,
            delta: args.delta,
        }
    };
    let answer = answer_query(&query)?;
    let mut json = serde_json::to_value(&answer).map_err(runtime)?;
    if let Some(eps) = args.target_eps {
        json["target_eps"] = eps.into();
    }
    emit(&serde_json::to_string_pretty(&json).map_err(runtime)?)?;
    Ok(())
}

fn parse_data_spec(text: &str) -> Result<SyntheticSpec, Failure> {
    let mut spec = SyntheticSpec {
        n: 0,
        dim: 0,
        separation: 3.0,
        label_noise: 0.0,
        seed: 0,
    };
    let (mut have_n, mut have_dim) = (false, false);
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("expected key=value, got `{item}`")))?;
        let bad = || Failure::Usage(format!("cannot parse `{v}` for `{k}`"));
        match k.trim() {
            "n" => {
                spec.n = v.trim().parse().map_err(|_| bad())?;
                have_n = true;
            }
            "dim" => {
                spec.dim = v.trim().parse().map_err(|_| bad())?;
                have_dim = true;
            }
            "separation" => spec.separation = v.trim().parse().map_err(|_| bad())?,
            "label_noise" => spec.label_noise = v.trim().parse().map_err(|_| bad())?,
            "seed" => spec.seed = v.trim().parse().map_err(|_| bad())?,
            other => return Err(Failure::Usage(format!("unknown data spec key `{other}`"))),
        }
    }
    if !(have_n && have_dim) {
        return Err(Failure::Usage("data spec needs n and dim".into()));
    }
    Ok(spec)
}
