use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tmle_lens::config::OUTPUT_DIR_ENV;
use tmle_lens::{run, Command, LabError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "tmle-lens", version, about = "TMLE with an interpretable multi-task network")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; stage seeds not set in the config derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config and the environment).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Sub {
    /// Generate the configured dataset.
    Dgp,
    /// Train the multi-task network.
    Train,
    /// TMLE with the network's heads as nuisance estimates.
    Tmle,
    /// Linear probes on every trunk layer.
    Probe,
    /// Importance-guided, random and band ablations.
    Ablate,
    /// Pathway tracing for every covariate.
    Trace,
    /// Sparse autoencoder (and transcoder) on trunk activations.
    Sae,
    /// Confounding and effect-size sweeps on generated data.
    Synthgen,
    /// DS1: TMLE, probes, ablations and band sweeps.
    Exp1,
    /// DS2: pathway tracing and overlap.
    Exp2,
    /// DS1: pathway tracing with overlays.
    Exp3,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Dgp => Command::Dgp,
            Sub::Train => Command::Train,
            Sub::Tmle => Command::Tmle,
            Sub::Probe => Command::Probe,
            Sub::Ablate => Command::Ablate,
            Sub::Trace => Command::Trace,
            Sub::Sae => Command::Sae,
            Sub::Synthgen => Command::Synthgen,
            Sub::Exp1 => Command::Exp1,
            Sub::Exp2 => Command::Exp2,
            Sub::Exp3 => Command::Exp3,
        }
    }
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>, LabError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("master_seed={seed}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(dir) = &cli.out {
        cfg.output_dir = dir.clone();
    } else if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    run(cli.command.into(), &cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
