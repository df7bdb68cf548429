use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmegp_cli::commands::{self, PlotArgs};
use dmegp_cli::parallel::RayonMap;
use dmegp_cli::{CliError, Result, RunConfig};

/// Deep mixed effect models with per-patient Gaussian processes.
#[derive(Debug, Parser)]
#[command(name = "dmegp", version)]
struct Cli {
    /// TOML run configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on the configured dataset.
    Train {
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Adapt to new patients and predict at query rows.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        /// CSV with the observed history; may contain only a header.
        #[arg(long)]
        history: Option<PathBuf>,
        /// CSV with query rows; `y` may be empty.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Predictions CSV (default `<output_dir>/predictions.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model on test patients.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Test CSV; defaults to the test split of the configured dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score all four sharing modes.
    Ablate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit a per-step trace for external plotting.
    PlotData {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        patient: Option<String>,
        #[arg(long)]
        history_steps: Option<usize>,
        /// Trace CSV (default `<output_dir>/trace.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic or CSV cohort as CSV files.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Command-line value, else the value recorded in a run manifest.
fn arg(cfg: &RunConfig, given: Option<PathBuf>, key: &str) -> Option<PathBuf> {
    given.or_else(|| cfg.invocation.as_ref().and_then(|i| i.args.get(key)).map(PathBuf::from))
}

fn required(cfg: &RunConfig, given: Option<PathBuf>, key: &str) -> Result<PathBuf> {
    arg(cfg, given, key).ok_or_else(|| CliError::Config(format!("--{key} is required")))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let cmd_name = match &cli.command {
        Command::Train { .. } => "train",
        Command::Predict { .. } => "predict",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::PlotData { .. } => "plot-data",
        Command::GenData { .. } => "gen-data",
    };
    // arguments recorded for another command do not apply
    if cfg.invocation.as_ref().is_some_and(|i| i.command != cmd_name) {
        cfg.invocation = None;
    }
    let default_model = || cfg.output_dir.join(commands::MODEL_FILE);
    match cli.command {
        Command::Train { out, epochs } => {
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.invocation = None;
            cfg.validate()?;
            let report = commands::train(&cfg, &RayonMap::from_env()?)?;
            println!("{}", report.model_path.display());
        }
        Command::Predict { model, history, queries, out } => {
            let model = arg(&cfg, model, "model").unwrap_or_else(default_model);
            let history = required(&cfg, history, "history")?;
            let queries = required(&cfg, queries, "queries")?;
            let out = arg(&cfg, out, "out").unwrap_or_else(|| cfg.output_dir.join("predictions.csv"));
            cfg.invocation = None;
            commands::predict(&cfg, &model, &history, &queries, &out)?;
            println!("{}", out.display());
        }
        Command::Eval { model, data, out } => {
            let model = arg(&cfg, model, "model").unwrap_or_else(default_model);
            let data = arg(&cfg, data, "data");
            let out = arg(&cfg, out, "out").unwrap_or_else(|| cfg.output_dir.clone());
            cfg.invocation = None;
            let report = commands::eval(&cfg, &model, data.as_deref(), &out)?;
            let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
            println!("one-step {} | forecast {} | trend {}", fmt(report.sequential()), fmt(report.forecast()), fmt(report.trend()));
        }
        Command::Ablate { out } => {
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.invocation = None;
            for row in commands::ablate(&cfg, &RayonMap::from_env()?)? {
                let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
                println!(
                    "{:<11} validation {:>12.6}  test {}  forecast {}",
                    row.mode.label(),
                    row.validation_metric,
                    fmt(row.report.sequential()),
                    fmt(row.report.forecast())
                );
            }
        }
        Command::PlotData { model, data, patient, history_steps, out } => {
            let model = arg(&cfg, model, "model").unwrap_or_else(default_model);
            let recorded = |k: &str| cfg.invocation.as_ref().and_then(|i| i.args.get(k)).cloned();
            let patient = patient.or_else(|| recorded("patient"));
            let history_steps = match history_steps {
                Some(h) => Some(h),
                None => recorded("history_steps")
                    .map(|h| h.parse().map_err(|_| CliError::Config(format!("bad history_steps `{h}`"))))
                    .transpose()?,
            };
            let args = PlotArgs { data: arg(&cfg, data, "data"), patient, history_steps };
            let out = arg(&cfg, out, "out").unwrap_or_else(|| cfg.output_dir.join("trace.csv"));
            cfg.invocation = None;
            let rows = commands::plot_data(&cfg, &model, &args, &out)?;
            println!("{} ({rows} rows)", out.display());
        }
        Command::GenData { out } => {
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.invocation = None;
            commands::gen_data(&cfg)?;
            println!("{}", cfg.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
