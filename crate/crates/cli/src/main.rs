//! `depthmotion`: generate synthetic data, train, refine, evaluate and
//! compare runs.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use depthmotion::Result;
use settings::{parse_switch, Settings};

#[derive(Parser)]
#[command(name = "depthmotion", version, about = "Monocular depth and ego-motion from video triplets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to --out.
    Generate,
    /// Train on --dataset; writes a checkpoint and loss curve to --out.
    Train,
    /// Evaluate --checkpoint with online refinement on --dataset.
    Refine,
    /// Evaluate --checkpoint on --dataset.
    Eval,
    /// Compare run directories written by eval or refine.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Flags {
    /// key = value settings file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["baseline", "motion"])]
    mode: Option<String>,
    /// Optimization steps per window [default: 20].
    #[arg(long, global = true)]
    refine_steps: Option<usize>,
    /// Scale predictions by the ratio of medians [default: on].
    #[arg(long, global = true, value_parser = ["on", "off"])]
    median_scale: Option<String>,
    /// Depth cap for evaluation [default: 80].
    #[arg(long, global = true)]
    cap: Option<f64>,
}

fn settings(flags: &Flags) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &flags.config {
        s.apply_file(path)?;
    }
    if let Some(v) = flags.seed {
        s.seed = v;
    }
    if let Some(v) = flags.steps {
        s.steps = v;
    }
    if let Some(v) = &flags.dataset {
        s.dataset = Some(v.clone());
    }
    if let Some(v) = &flags.checkpoint {
        s.checkpoint = Some(v.clone());
    }
    if let Some(v) = &flags.out {
        s.out = Some(v.clone());
    }
    if let Some(v) = &flags.mode {
        s.mode = v.parse()?;
    }
    if let Some(v) = flags.refine_steps {
        s.refine_steps = v;
    }
    if let Some(v) = &flags.median_scale {
        s.median_scale = parse_switch(v)?;
    }
    if let Some(v) = flags.cap {
        s.cap = v;
    }
    Ok(s)
}

fn run(cli: &Cli) -> Result<()> {
    let s = settings(&cli.flags)?;
    match &cli.command {
        Command::Generate => commands::generate(&s),
        Command::Train => commands::train(&s),
        Command::Refine => commands::refine(&s),
        Command::Eval => commands::eval(&s),
        Command::Report { runs } => commands::report(&s, runs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
