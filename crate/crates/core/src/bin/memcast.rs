//! `memcast` — memory-driven Transformer forecasting from the command line.
//!
//! Verbs: `train`, `eval`, `forecast`, `selfcheck`, `synth`.
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use memcast::cli;
use memcast::config;
use memcast::error::Error;

#[derive(Parser)]
#[command(
    name = "memcast",
    about = "Memory-driven Transformer engine for long-horizon multivariate forecasting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write checkpoint + history.
    Train {
        /// Key-value config file (dotted keys, one per line).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its dataset's test split.
    Eval {
        /// Path to a checkpoint written by `train`.
        checkpoint: PathBuf,
        /// Evaluate against this CSV instead of the stored data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Keep the memory matrix inert during evaluation.
        #[arg(long)]
        freeze_memory: bool,
        /// Directory for metrics.txt (metrics print to stdout regardless).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast one test window and emit true/predicted/persistence rows.
    Forecast {
        /// Path to a checkpoint written by `train`.
        checkpoint: PathBuf,
        /// Forecast against this CSV instead of the stored data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Rolling-window index within the test split.
        #[arg(long, default_value_t = 0)]
        window: usize,
        /// Directory for forecast.csv (rows print to stdout regardless).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient self-check battery and report each primitive.
    Selfcheck {
        /// Flip one analytic gradient's sign to prove failures are caught.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Generate a synthetic dataset CSV.
    Synth {
        #[arg(long, default_value_t = 2000)]
        points: usize,
        #[arg(long, default_value_t = 3)]
        features: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Destination CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command, w: &mut impl Write) -> Result<(), Error> {
    match command {
        Command::Train { config, seed, out } => {
            let mut cfg = config::load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = out {
                cfg.out_dir = dir.display().to_string();
            }
            let outcome = cli::cmd_train(&cfg)?;
            for e in &outcome.report.epochs {
                writeln!(
                    w,
                    "epoch {}  train_mse {:.6}  val_mse {:.6}  lr {:.2e}  dropout {:.4}",
                    e.epoch, e.train_mse, e.val_mse, e.lr, e.dropout_rate
                )?;
            }
            writeln!(
                w,
                "best epoch {} (val_mse {:.6}); test mse {:.6} mae {:.6}",
                outcome.report.best_epoch,
                outcome.report.best_val_mse,
                outcome.test_mse,
                outcome.test_mae
            )?;
            writeln!(w, "checkpoint: {}", outcome.checkpoint_path.display())?;
            writeln!(w, "history:    {}", outcome.history_path.display())?;
            writeln!(w, "config:     {}", outcome.config_path.display())?;
            Ok(())
        }
        Command::Eval { checkpoint, data, freeze_memory, out } => {
            let outcome =
                cli::cmd_eval(&checkpoint, data.as_deref(), freeze_memory, out.as_deref())?;
            writeln!(w, "mse = {}", outcome.mse)?;
            writeln!(w, "mae = {}", outcome.mae)?;
            writeln!(
                w,
                "memory updates = {} (frozen: {freeze_memory})",
                outcome.updates_after - outcome.updates_before
            )?;
            if let Some(p) = outcome.metrics_path {
                writeln!(w, "metrics: {}", p.display())?;
            }
            Ok(())
        }
        Command::Forecast { checkpoint, data, window, out } => {
            let outcome =
                cli::cmd_forecast(&checkpoint, data.as_deref(), window, out.as_deref())?;
            writeln!(w, "timestamp,true,predicted,persistence")?;
            for (ts, truth, pred, base) in &outcome.rows {
                writeln!(w, "{ts},{truth},{pred},{base}")?;
            }
            if let Some(p) = outcome.csv_path {
                writeln!(w, "forecast: {}", p.display())?;
            }
            Ok(())
        }
        Command::Selfcheck { inject_fault } => {
            let report = cli::cmd_selfcheck(inject_fault)?;
            write!(w, "{}", report.render())?;
            if report.all_passed() {
                Ok(())
            } else {
                Err(Error::Numeric("self-check reported failing gradients".into()))
            }
        }
        Command::Synth { points, features, seed, out } => {
            cli::cmd_synth(points, features, seed, &out)?;
            writeln!(w, "wrote {points} x {features} synthetic series to {}", out.display())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli.command, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed pipe downstream (e.g. `memcast forecast … | head`) is not
        // a failure of the command itself.
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
