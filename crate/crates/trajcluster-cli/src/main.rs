//! `trajcluster`: trajectory phenotyping of ICU time series from the command
//! line. `synth` generates a labeled synthetic cohort, `run` executes the
//! full clustering and characterization pipeline, and `eval` scores recovered
//! clusters against ground truth.

mod config;
mod pca;
mod pipeline;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "trajcluster", version, about = "ICU trajectory phenotyping pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides TRAJCLUSTER_OUT and the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted phenotypes.
    Synth(CommonArgs),
    /// Run ingest, preprocessing, clustering, selection, and characterization.
    Run(CommonArgs),
    /// Score recovered clusters against ground-truth labels.
    Eval(CommonArgs),
}

fn execute(command: &Command) -> anyhow::Result<()> {
    let args = match command {
        Command::Synth(a) | Command::Run(a) | Command::Eval(a) => a,
    };
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out_dir = cfg.resolve_out_dir(args.out.as_deref());
    match command {
        Command::Synth(_) => pipeline::cmd_synth(&cfg, &out_dir),
        Command::Run(_) => {
            let summary = pipeline::cmd_run(&cfg, &out_dir)?;
            for (method, k) in &summary.selected {
                println!("{method}: selected k = {k}");
            }
            println!(
                "characterized {} clusters ({}), log-rank p {:.3e} -> {}",
                summary.primary_k,
                summary.primary_method.key(),
                summary.logrank_p,
                out_dir.display()
            );
            Ok(())
        }
        Command::Eval(_) => pipeline::cmd_eval(&cfg, &out_dir).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
