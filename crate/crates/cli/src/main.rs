mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "openmix", version, about = "Generate training pairs, train and evaluate open-set classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage, overriding the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the dataset and build the positive/negative pair bank
    Generate,
    /// Train the classifier on the pair bank in the output directory
    Train,
    /// Evaluate a checkpoint on the test split
    Eval {
        /// Checkpoint to evaluate (default: <out>/checkpoint.txt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check the inversion identities and the step-alignment trend
    Verify,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.common.seed, cli.common.out.clone(), cli.common.workers);
    cfg.validate()?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting worker pool")?;

    pool.install(|| match &cli.command {
        Command::Generate => {
            let path = commands::generate(&cfg)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Train => {
            let path = commands::train_cmd(&cfg)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Eval { checkpoint } => {
            let r = commands::eval(&cfg, checkpoint.as_deref())?;
            println!(
                "closed {:.4}  open known {:.4}  unknown {:.4}  new {:.4}  balance {:.4}",
                r.closed_known_acc, r.open_known_acc, r.open_unknown_acc, r.open_new_acc, r.balance
            );
            Ok(())
        }
        Command::Verify => {
            let v = commands::verify(&cfg)?;
            println!(
                "identity residuals {:.2e} / {:.2e}, alignment decays: {}",
                v["max_inversion_residual"].as_f64().unwrap_or(f64::NAN),
                v["max_decomposition_residual"].as_f64().unwrap_or(f64::NAN),
                v["delta"]["decays"]
            );
            Ok(())
        }
    })
}
