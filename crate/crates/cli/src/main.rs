use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use privmap::pipeline::{resolve_out, Pipeline, RunConfig, Stage};
use privmap::Result;

/// Privacy-protected denominators and small-area disease mapping.
#[derive(Parser)]
#[command(name = "privmap", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replicate workers for `simulate`.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory. `PRIVMAP_OUT` takes precedence.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the geography and synthetic tabulations.
    Geo,
    /// Apply the disclosure-avoidance mechanism.
    Protect,
    /// Reference rates and expected counts per source.
    Expect,
    /// Fit the spatial model once per source.
    Fit,
    /// Replicated simulation study; also writes the report.
    Simulate,
    /// Rebuild report tables from stored replicates.
    Report,
    /// Every stage in order.
    Run,
    /// Print the resolved configuration.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(0) = cli.jobs {
        return Err(privmap::Error::Config("--jobs must be at least 1".into()));
    }
    let stage = match cli.command {
        Command::Config => {
            print!("{}", config.to_toml());
            return Ok(());
        }
        Command::Geo => Some(Stage::Geo),
        Command::Protect => Some(Stage::Protect),
        Command::Expect => Some(Stage::Expect),
        Command::Fit => Some(Stage::Fit),
        Command::Simulate => Some(Stage::Simulate),
        Command::Report => Some(Stage::Report),
        Command::Run => None,
    };
    let out = resolve_out(cli.out.as_deref(), &config);
    let pipeline = Pipeline::new(config, out, cli.jobs)?;
    match stage {
        Some(s) => pipeline.run(s),
        None => pipeline.run_all(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("privmap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
