use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};

use qwloc::experiment::{replay, run_to_dir, ExperimentConfig, Subcommand};
use qwloc::Error;

/// Random coined quantum walks: exact checks and Monte Carlo experiments.
///
/// Worker threads are capped by the QWLOC_THREADS environment variable.
#[derive(Parser)]
#[command(name = "qwloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding the one in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: qwloc-out/<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Cycle decomposition and the localization condition.
    CheckPerm(RunArgs),
    /// Bands of the Fourier symbol and the flat-band criterion.
    Dispersion(RunArgs),
    /// Exact block spectra against numerical diagonalization.
    Spectrum(RunArgs),
    /// Probability that the spectrum avoids an arc.
    ArcStats(RunArgs),
    /// Probability that the spectrum comes within η of z.
    DistScaling(RunArgs),
    /// Position moments of the evolving walker.
    Dynamics(RunArgs),
    /// Fractional moments of the resolvent and their decay.
    FmDecay(RunArgs),
    /// Finite-volume fractional moments against L.
    FvScan(RunArgs),
    /// Geometric resolvent identities and exact algebra.
    VerifyIdentities(RunArgs),
    /// Rerun a manifest and compare its data files byte for byte.
    Replay {
        /// A manifest.json or the directory holding it.
        #[arg(long)]
        config: PathBuf,
    },
}

fn execute(cmd: Subcommand, args: &RunArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let cfg = ExperimentConfig::from_json(&text)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("qwloc-out").join(cmd.name()));
    let (manifest, set) = run_to_dir(cmd, &cfg, args.seed, &out)?;
    for line in &set.lines {
        println!("{line}");
    }
    println!(
        "wrote {} files and manifest.json to {} ({:.2} s, seed {})",
        manifest.files.len(),
        out.display(),
        manifest.wall_time_seconds,
        manifest.seed
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Replay { config } => replay(config).map(|rep| {
            for f in &rep.identical {
                println!("identical: {f}");
            }
            for f in &rep.differing {
                println!("DIFFERS: {f}");
            }
            for f in &rep.missing {
                println!("MISSING: {f}");
            }
            rep.bit_identical()
        }),
        c => {
            let (cmd, args) = match c {
                Command::CheckPerm(a) => (Subcommand::CheckPerm, a),
                Command::Dispersion(a) => (Subcommand::Dispersion, a),
                Command::Spectrum(a) => (Subcommand::Spectrum, a),
                Command::ArcStats(a) => (Subcommand::ArcStats, a),
                Command::DistScaling(a) => (Subcommand::DistScaling, a),
                Command::Dynamics(a) => (Subcommand::Dynamics, a),
                Command::FmDecay(a) => (Subcommand::FmDecay, a),
                Command::FvScan(a) => (Subcommand::FvScan, a),
                Command::VerifyIdentities(a) => (Subcommand::VerifyIdentities, a),
                Command::Replay { .. } => unreachable!(),
            };
            execute(cmd, args).map(|_| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("qwloc: invalid configuration: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("qwloc: {e}");
            ExitCode::from(1)
        }
    }
}
