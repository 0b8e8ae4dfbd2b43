use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tcvn::datagen::Split;
use tcvn_cli::{cmd_evaluate, cmd_generate, cmd_interpret, cmd_train, load_config, Analysis, Overrides};

#[derive(Parser)]
#[command(name = "tcvn", version, about = "Sparse-CNN + transformer event and prong classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration (defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for `generate`)
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train, optionally resuming from a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a split and write the metrics report
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Evaluate a predictions file instead of running the model
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run an attention or saliency analysis
    Interpret {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// attention, attention-per-prong, event-attention, saliency-grid,
        /// saliency-grid-matched, integrated or integrated-gaussian
        #[arg(long)]
        which: String,
    },
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        output: c.output.clone(),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let config = load_config(common.config.as_deref())?;
            let dir = cmd_generate(&config, &overrides(&common))?;
            println!("wrote dataset to {}", dir.display());
        }
        Command::Train { common, checkpoint } => {
            let config = load_config(common.config.as_deref())?;
            let state = cmd_train(&config, &overrides(&common), checkpoint.as_deref(), |m| {
                let val = m.val.map_or(String::new(), |v| {
                    format!(" val event {:.4} prong {:.4} prong9 {:.4}", v.event, v.prong, v.prong_fine)
                });
                println!(
                    "epoch {} loss {:.5} train event {:.4} prong {:.4}{val}",
                    m.epoch, m.train_loss, m.train.event, m.train.prong
                );
            })?;
            println!("finished at epoch {}", state.epoch);
        }
        Command::Evaluate {
            common,
            checkpoint,
            split,
            predictions,
        } => {
            let config = load_config(common.config.as_deref())?;
            let r = cmd_evaluate(&config, &overrides(&common), checkpoint.as_deref(), predictions.as_deref(), split)?;
            for (name, set) in [("event", &r.event), ("prong", &r.prong), ("prong9", &r.prong_fine)] {
                let m = &set.metrics;
                println!(
                    "{name}: n {} accuracy {:.4} precision {:.4} recall {:.4} auc {}",
                    m.samples,
                    m.accuracy,
                    m.precision,
                    m.recall,
                    m.auc.map_or("n/a".into(), |a| format!("{a:.4}"))
                );
            }
        }
        Command::Interpret {
            common,
            checkpoint,
            split,
            which,
        } => {
            let config = load_config(common.config.as_deref())?;
            let (path, _) = cmd_interpret(&config, &overrides(&common), &checkpoint, split, Analysis::parse(&which)?)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
