//! Thin command-line front end; all logic lives in `vpa::cli`.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use vpa::cli::{
    cmd_ablate, cmd_adapt, cmd_report, cmd_train_source, default_grid, AblationAxis, RunConfig,
};
use vpa::engine::{Lifecycle, Regime};

#[derive(Parser)]
#[command(name = "vpa", about = "Test-time visual prompt adaptation for small ViTs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the frozen source classifier on clean shapes
    TrainSource {
        /// Run configuration JSON (defaults to the built-in toy config)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt prompts over a shifted test stream (with source baseline)
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained source checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for metrics.csv / summary.json
        #[arg(long)]
        out: PathBuf,
        /// Override the configured regime (bia|sia|pla)
        #[arg(long)]
        regime: Option<String>,
        /// Override the configured lifecycle (episodic|continual)
        #[arg(long)]
        lifecycle: Option<String>,
        /// Override adaptation steps (0 = debug, predictions only)
        #[arg(long)]
        steps: Option<usize>,
        /// Override adaptation learning rate
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Sweep one hyperparameter axis over independent sessions
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// steps|tau|prompt_size|k|augment
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values (axis default if omitted)
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Join run summaries into one comparison table
    Report {
        /// Run directories containing summary.json
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Consolidated CSV output path
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> vpa::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::toy_default()),
    }
}

fn parse_regime(s: &str) -> vpa::Result<Regime> {
    match s {
        "bia" => Ok(Regime::Bia),
        "sia" => Ok(Regime::Sia),
        "pla" => Ok(Regime::Pla),
        _ => Err(vpa::VpaError::Config(format!("unknown regime {s} (bia|sia|pla)"))),
    }
}

fn parse_lifecycle(s: &str) -> vpa::Result<Lifecycle> {
    match s {
        "episodic" => Ok(Lifecycle::Episodic),
        "continual" => Ok(Lifecycle::Continual),
        _ => Err(vpa::VpaError::Config(format!(
            "unknown lifecycle {s} (episodic|continual)"
        ))),
    }
}

fn run(cli: Cli) -> vpa::Result<()> {
    match cli.command {
        Command::TrainSource { config, out } => {
            let cfg = load_config(&config)?;
            let report = cmd_train_source(&cfg, &out)?;
            println!(
                "trained {} epochs, final loss {:.4}, clean accuracy {:.4}",
                report.epoch_losses.len(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                report.clean_accuracy
            );
            println!("checkpoint: {}", out.display());
        }
        Command::Adapt { config, checkpoint, out, regime, lifecycle, steps, lr } => {
            let mut cfg = load_config(&config)?;
            if let Some(r) = regime {
                cfg.adapt.regime = parse_regime(&r)?;
            }
            if let Some(l) = lifecycle {
                cfg.adapt.lifecycle = parse_lifecycle(&l)?;
            }
            if let Some(s) = steps {
                cfg.adapt.steps = s;
            }
            if let Some(lr) = lr {
                cfg.adapt.lr = lr;
            }
            let summary = cmd_adapt(&cfg, &checkpoint, &out)?;
            println!(
                "{} {} on {}: source_acc {:.4}, adapted_acc {:.4}, delta {:+.4}",
                summary.regime,
                summary.lifecycle,
                summary.data_label,
                summary.source_acc,
                summary.adapted_acc,
                summary.accuracy_delta
            );
            println!("outputs: {}", out.display());
        }
        Command::Ablate { config, checkpoint, axis, grid, out } => {
            let cfg = load_config(&config)?;
            let axis: AblationAxis = axis.parse()?;
            let grid: Vec<String> = match grid {
                Some(g) => g.split(',').map(|s| s.trim().to_string()).collect(),
                None => default_grid(axis),
            };
            let rows = cmd_ablate(&cfg, &checkpoint, axis, &grid, &out)?;
            println!("{:<12} {:>10} {:>14} {:>14}", "value", "accuracy", "entropy_pre", "entropy_post");
            for r in &rows {
                println!(
                    "{:<12} {:>10.4} {:>14.4} {:>14.4}",
                    r.value, r.accuracy, r.entropy_pre, r.entropy_post
                );
            }
            println!("outputs: {}", out.display());
        }
        Command::Report { runs, out } => {
            let table = cmd_report(&runs, &out)?;
            print!("{table}");
            println!("csv: {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
