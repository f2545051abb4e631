//! Command-line driver for the pendulum-lattice energy-transfer pipeline.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 verification-hypothesis
//! failure, 4 numerical failure, 5 chain/shadowing construction failure.

use clap::{Parser, Subcommand};
use pendulum_lattice::config::RunConfig;
use pendulum_lattice::runner::{exit_code, RunContext, Stage};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pendlat",
    version,
    about = "Energy transfer along weakly coupled pendulum lattices",
    long_about = "Verifies the splitting hypotheses of a coupled pendulum \
lattice, builds the invariant-manifold and transition-chain machinery, and \
assembles a shadowing trajectory that carries an energy packet along a \
prescribed path of sites. Outputs are JSON reports and CSV time series; a \
manifest.json ties them to the configuration hash."
)]
struct Cli {
    /// JSON run configuration; omitted means the shipped three-site demo.
    #[arg(long, global = true, env = "PENDLAT_CONFIG", value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory for reports, tables, and the manifest.
    #[arg(long, global = true, env = "PENDLAT_OUT", value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "PENDLAT_THREADS", value_name = "N")]
    threads: Option<usize>,
    /// Seed of the randomized audit suite (overrides the config).
    #[arg(long, global = true, env = "PENDLAT_SEED", value_name = "U64")]
    seed: Option<u64>,
    /// Directory for cached intermediate artifacts, keyed by config hash.
    #[arg(long, global = true, env = "PENDLAT_STAGE_CACHE", value_name = "DIR")]
    stage_cache: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the splitting-function hypotheses over the verification grid.
    VerifyHypotheses,
    /// Solve the invariant manifolds of the first path torus and report
    /// hyperbolicity diagnostics.
    Manifold,
    /// Build the certified transition chain along the energy path.
    Chain,
    /// Assemble the shadowing trajectory of the (possibly cached) chain.
    Shadow,
    /// Full pipeline: verify, chain, shadow.
    DemoTransfer,
    /// Randomized audit of the decay-operator algebra.
    DecayAudit,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::VerifyHypotheses => Stage::VerifyHypotheses,
            Command::Manifold => Stage::Manifold,
            Command::Chain => Stage::Chain,
            Command::Shadow => Stage::Shadow,
            Command::DemoTransfer => Stage::DemoTransfer,
            Command::DecayAudit => Stage::DecayAudit,
        }
    }
}

fn run(cli: Cli) -> Result<(), pendulum_lattice::Error> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let threads = cli.threads.unwrap_or(0); // 0 lets the pool pick all cores
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| {
                pendulum_lattice::Error::Config(format!("thread pool setup: {e}"))
            })?;
    }
    let seed = cli.seed.unwrap_or(config.seed);
    let out = cli.out.unwrap_or_else(|| PathBuf::from("out"));
    let stage = cli.command.stage();
    let mut ctx = RunContext::new(
        config,
        out.clone(),
        cli.stage_cache.clone(),
        seed,
        if threads == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            threads
        },
    )?;
    ctx.run(stage)?;
    println!("{}: ok (outputs in {})", stage.name(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
