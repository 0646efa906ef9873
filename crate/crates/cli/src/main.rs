use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qreg_cli::{
    cmd_multitask, cmd_noise_sweep, cmd_stability_sweep, cmd_train, CliError, ExperimentConfig, RunOptions,
};

#[derive(Parser)]
#[command(name = "qreg", version, about = "Label-noise experiments comparing quantization with classic regularizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one mode at one noise level for each seed
    Train(Common),
    /// Accuracy against label-noise level for several modes
    NoiseSweep(Common),
    /// Gain of each hyper-parameter value over a reference value
    StabilitySweep(Common),
    /// Per-task F1 of every mode on noisy multi-task data
    Multitask(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config file
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds overriding `train.seeds`
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Suppress progress output
    #[arg(long)]
    quiet: bool,
}

type CommandFn = fn(&ExperimentConfig, &RunOptions) -> Result<String, CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, command): (&Common, CommandFn) = match &cli.command {
        Command::Train(c) => (c, cmd_train),
        Command::NoiseSweep(c) => (c, cmd_noise_sweep),
        Command::StabilitySweep(c) => (c, cmd_stability_sweep),
        Command::Multitask(c) => (c, cmd_multitask),
    };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seeds) = &common.seeds {
        if seeds.is_empty() {
            return Err(CliError::Config("--seeds is empty".into()));
        }
        cfg.seeds = seeds.clone();
    }
    std::fs::create_dir_all(&common.out)?;
    let opts = RunOptions { out: common.out.clone(), quiet: common.quiet };
    let fingerprint = command(&cfg, &opts)?;
    if !common.quiet {
        eprintln!("config fingerprint {fingerprint}; results in {}", common.out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qreg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
