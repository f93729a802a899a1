use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualebm::runner::{run_experiment, ExperimentConfig, Mode, RunOptions};

#[derive(Parser)]
#[command(name = "dualebm", version, about = "Train shallow energy-based models and run the 1-D mean-field solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample training and test sets from the teacher.
    TeacherGen(Flags),
    /// Simultaneous particle/neuron training.
    TrainDual(Flags),
    /// Direct score-matching training.
    TrainSm(Flags),
    /// Noisy MMD particle flow.
    TrainMmd(Flags),
    /// Gridded solver of the 1-D torus dynamics.
    Pde1d(Flags),
    /// Concurrent seeded copies of the mode named in `[sweep]`.
    Sweep(Flags),
}

#[derive(Args)]
struct Flags {
    /// TOML experiment file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics row interval in iterations.
    #[arg(long)]
    log_every: Option<u64>,
    /// Continue from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write SVG curves next to the metrics.
    #[arg(long)]
    plot: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, flags) = match cli.command {
        Command::TeacherGen(f) => (Mode::TeacherGen, f),
        Command::TrainDual(f) => (Mode::TrainDual, f),
        Command::TrainSm(f) => (Mode::TrainSm, f),
        Command::TrainMmd(f) => (Mode::TrainMmd, f),
        Command::Pde1d(f) => (Mode::Pde1d, f),
        Command::Sweep(f) => (Mode::Sweep, f),
    };
    match run(mode, flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(mode: Mode, flags: Flags) -> dualebm::Result<()> {
    let mut cfg = ExperimentConfig::from_file(&flags.config)?;
    if cfg.mode != mode {
        return Err(dualebm::Error::InvalidConfig(format!(
            "{} declares mode = \"{}\" but the subcommand is {}",
            flags.config.display(),
            cfg.mode.name(),
            mode.name()
        )));
    }
    cfg.mode = mode;
    let opts = RunOptions { out: flags.out, seed: flags.seed, log_every: flags.log_every, resume: flags.resume, plot: flags.plot };
    let s = run_experiment(&cfg, &opts)?;
    match &s.metrics {
        Some(m) => println!("{} rows -> {}", s.records, m.display()),
        None if !s.children.is_empty() => println!("{} runs -> {}", s.children.len(), s.out_dir.display()),
        None => println!("wrote {}", s.out_dir.display()),
    }
    Ok(())
}
