use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phaseforge::pipeline::{
    cmd_evaluate, cmd_ingest, cmd_phantom, cmd_synthesize, cmd_train_recon, cmd_train_sbdm, run_all,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "phaseforge", version, about = "Phase synthesis and reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a phantom dataset with patient splits.
    Phantom,
    /// Ingest single-coil HDF5 k-space files.
    Ingest,
    /// Train the conditional score model.
    TrainSbdm,
    /// Synthesize complex datasets for each phase source.
    Synthesize,
    /// Train one reconstruction model per phase source and seed.
    TrainRecon,
    /// Evaluate models and the zero-filled baseline.
    Evaluate,
    /// Run every stage in order.
    RunAll,
}

fn run(cli: &Cli) -> phaseforge::Result<Vec<String>> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let one = |r: phaseforge::Result<String>| r.map(|s| vec![s]);
    match cli.command {
        Command::Phantom => one(cmd_phantom(&cfg)),
        Command::Ingest => one(cmd_ingest(&cfg)),
        Command::TrainSbdm => one(cmd_train_sbdm(&cfg)),
        Command::Synthesize => one(cmd_synthesize(&cfg)),
        Command::TrainRecon => one(cmd_train_recon(&cfg)),
        Command::Evaluate => one(cmd_evaluate(&cfg)),
        Command::RunAll => run_all(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
