use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wpfio::config::ExperimentConfig;
use wpfio::Error;

mod stages;

/// Wave-packet FIO pipeline: each command runs one stage and writes `.fgrid`
/// artifacts plus a manifest under `<out>/<config-hash>/<stage>/`.
#[derive(Parser, Debug)]
#[command(name = "wpfio", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; defaults to `output.dir` of the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Recompute the stage even if its outputs are up to date.
    #[arg(long, global = true)]
    stage_force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Frequency tiling, co-partition sum and the source packet.
    Tile,
    /// Ray fan from the source with propagator determinants.
    Trace {
        #[arg(long, default_value_t = 41)]
        rays: usize,
        #[arg(long, default_value_t = 141)]
        samples: usize,
    },
    /// Caustic detection on the phase-space lattice.
    Caustics,
    /// Cover sets, partition weights and source pullbacks.
    Prepare,
    /// Operator output, total and per set.
    Apply,
    /// Finite-difference reference solution.
    Fdref,
    /// Compare two fields (default: operator output against the reference).
    Compare {
        /// Field to test; defaults to the apply stage's total.
        #[arg(long)]
        a: Option<PathBuf>,
        /// Reference field; defaults to the fdref stage's field.
        #[arg(long)]
        b: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) => 2,
        Error::Upstream(_) | Error::Format(_) => 3,
        Error::Io(_) => 1,
        _ => 4,
    }
}

fn run(cli: Cli) -> wpfio::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    if let Command::Compare { a: Some(a), b: Some(b) } = &cli.command {
        if cli.config.is_none() {
            let out = cli.out.clone().ok_or_else(|| Error::Config("compare without --config needs --out".into()))?;
            return stages::compare_files(a, b, None, &out);
        }
    }
    let path = cli.config.clone().ok_or_else(|| Error::Config("--config is required".into()))?;
    let cfg = ExperimentConfig::load(&path)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let ctx = stages::Context::new(cfg, out, cli.stage_force)?;
    match cli.command {
        Command::Tile => ctx.tile(),
        Command::Trace { rays, samples } => ctx.trace(rays, samples),
        Command::Caustics => ctx.caustics(),
        Command::Prepare => ctx.prepare(),
        Command::Apply => ctx.apply(),
        Command::Fdref => ctx.fdref(),
        Command::Compare { a, b } => ctx.compare(a, b),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
