//! `sca` — train defended models, attack them, and tabulate the results.
//!
//! Every subcommand except `report` takes an experiment config (flat
//! `key = value` lines; see the experiment module docs for the key list).
//! Seeds can be overridden from the command line for sweeps without
//! editing configs.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sca_core::attacks::Seeds;
use sca_core::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "sca", version, about = "Sparse-coding defenses against model-inversion attacks")]
struct Cli {
    /// Worker threads for the numeric kernels (defaults to all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured defense and write its checkpoint
    Train(RunArgs),
    /// Attack a trained checkpoint and append a result row
    Attack(RunArgs),
    /// Print a checkpoint's train/test accuracy
    Evaluate(RunArgs),
    /// Render result CSVs as Markdown tables, strongest defense last
    Report {
        /// One or more results.csv files to merge
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file
    config: PathBuf,

    /// Replace the master seed (re-derives the model/attack/split streams,
    /// which the flags below can then override individually)
    #[arg(long)]
    seed: Option<u64>,

    /// Override the model-initialization/training stream
    #[arg(long)]
    seed_model: Option<u64>,

    /// Override the attack stream
    #[arg(long)]
    seed_attack: Option<u64>,

    /// Override the data-split stream
    #[arg(long)]
    seed_split: Option<u64>,
}

fn load(args: &RunArgs) -> sca_core::Result<ExperimentConfig> {
    let mut cfg = experiment::load_config(&args.config)?;
    if let Some(master) = args.seed {
        cfg.seeds = Seeds::from_master(master);
    }
    if let Some(s) = args.seed_model {
        cfg.seeds.model = s;
    }
    if let Some(s) = args.seed_attack {
        cfg.seeds.attack = s;
    }
    if let Some(s) = args.seed_split {
        cfg.seeds.split = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> sca_core::Result<()> {
    if let Some(jobs) = cli.jobs {
        // Ignore the error if a pool already exists (e.g. under a harness).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match cli.command {
        Command::Train(args) => {
            let path = experiment::cmd_train(&load(&args)?)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::Attack(args) => {
            experiment::cmd_attack(&load(&args)?)?;
        }
        Command::Evaluate(args) => {
            experiment::cmd_evaluate(&load(&args)?)?;
        }
        Command::Report { results } => {
            let rows = experiment::load_rows(&results)?;
            print!("{}", experiment::cmd_report(&rows)?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
