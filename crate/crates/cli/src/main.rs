use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use edgefuse_cli::commands;
use edgefuse_cli::config;

#[derive(Parser)]
#[command(
    name = "edgefuse",
    version,
    about = "Simulator for collaborative edge inference over lossy sidelinks"
)]
struct Cli {
    /// Config file (flat key = value with [sections]); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config seed and the sweep seed list
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, CSV and plots
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the backbone classifier on clean data and checkpoint it
    Pretrain,
    /// Train the query/key matching modules with channels in the loop
    Train,
    /// Run seeded evaluation rounds and print the metrics
    Eval,
    /// Run the configured grid, writing results.csv and SVG charts
    Sweep,
    /// Re-render the SVG charts from an existing results CSV
    Plot {
        /// Results CSV to plot; defaults to <out>/results.csv
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
        cfg.sweep.seeds = vec![seed];
    }
    match cli.cmd {
        Cmd::Pretrain => commands::cmd_pretrain(&cfg, &cli.out),
        Cmd::Train => commands::cmd_train(&cfg, &cli.out),
        Cmd::Eval => commands::cmd_eval(&cfg, &cli.out),
        Cmd::Sweep => commands::cmd_sweep(&cfg, &cli.out),
        Cmd::Plot { csv } => commands::cmd_plot(&cli.out, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
