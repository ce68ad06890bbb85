use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lfit::commands::{cmd_evaluate, cmd_explain, cmd_forecast, cmd_generate, cmd_train};
use lfit::{CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "lfit", version, about = "Interpretable multi-horizon quantile forecasting of monitoring series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration (or a manifest written by an earlier run)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// ST-NSP, MT-MPC, ST-NSP-EV or MT-MPC-PK-EV
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Add persistence-baseline columns to metrics.csv
    #[arg(long, global = true)]
    baseline: bool,
    /// Model file for forecast, explain and evaluate
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Forecast steps to write
    #[arg(long, global = true)]
    horizon: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic dataset, its schema and ground truth
    Generate,
    /// Train a model and save it to the run directory
    Train,
    /// Forecast past the end of every series
    Forecast,
    /// Write variable importance and attention matrices
    Explain,
    /// Score the test split
    Evaluate,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let base = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&Overrides {
        seed: cli.seed,
        out: cli.out,
        scenario: cli.scenario,
        baseline: cli.baseline,
        model: cli.model,
        horizon: cli.horizon,
    });
    cfg.scenario_spec()?;
    match cli.command {
        Command::Generate => {
            let truth = cmd_generate(&cfg)?;
            println!("wrote {} series to {}", truth.len(), cfg.out.display());
        }
        Command::Train => {
            let t = cmd_train(&cfg)?;
            println!(
                "trained {} epochs (best {}, validation objective {:.5}); model at {}",
                t.log.epochs.len(),
                t.log.best_epoch,
                t.log.best_val_objective,
                t.model_path.display()
            );
        }
        Command::Forecast => {
            let rows = cmd_forecast(&cfg)?;
            println!("wrote {} forecast rows to {}", rows.len(), cfg.out.join("forecasts.csv").display());
        }
        Command::Explain => {
            let s = cmd_explain(&cfg)?;
            println!("explained {} windows into {}", s.windows, cfg.out.display());
        }
        Command::Evaluate => {
            let e = cmd_evaluate(&cfg)?;
            match &e.baseline {
                Some(b) => println!("MAE {:.5} (persistence {:.5})", e.report.overall.mae, b.overall.mae),
                None => println!("MAE {:.5}", e.report.overall.mae),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
