use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperpencil_cli::{run_with_threads, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(name = "hyperpencil", version, about = "Run a configured spectral experiment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spectral density along a k grid.
    Density(Common),
    /// Entropy scans over a rectangle, optionally for several truncation radii.
    Entropy(Common),
    /// Seeded battery of scattering identities.
    Identities(Common),
    /// Krein transform equivalence for a fixed potential.
    KreinCheck(Common),
    /// Radial mode evolution with the block recursion fit.
    Twist(Common),
    /// Energy identity of the adjoint radial evolution.
    Adjoint(Common),
    /// Green kernel decay of the discretized pencil.
    CombesThomas(Common),
    /// Resolvent bound battery for the discretized pencil.
    PencilBound(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; default `out/<experiment>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn split(self) -> (ExperimentKind, Common) {
        match self {
            Command::Density(c) => (ExperimentKind::Density, c),
            Command::Entropy(c) => (ExperimentKind::Entropy, c),
            Command::Identities(c) => (ExperimentKind::Identities, c),
            Command::KreinCheck(c) => (ExperimentKind::KreinCheck, c),
            Command::Twist(c) => (ExperimentKind::Twist, c),
            Command::Adjoint(c) => (ExperimentKind::Adjoint, c),
            Command::CombesThomas(c) => (ExperimentKind::CombesThomas, c),
            Command::PencilBound(c) => (ExperimentKind::PencilBound, c),
        }
    }
}

fn main() -> ExitCode {
    let (kind, args) = Cli::parse().command.split();
    let cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if cfg.experiment != kind {
        eprintln!(
            "config error: experiment: {} does not match subcommand {}",
            cfg.experiment.name(),
            kind.name()
        );
        return ExitCode::from(2);
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from("out").join(kind.name()));
    match run_with_threads(&cfg, args.seed, &out, args.threads) {
        Ok(outcome) => {
            let m = &outcome.manifest;
            for t in &m.tasks {
                println!("{:<8} {}: {}", t.status, t.name, t.detail);
            }
            println!(
                "{}: {} ({:.2} s, manifest {})",
                m.experiment,
                if m.pass { "PASS" } else { "FAIL" },
                m.wall_time_s,
                out.join(hyperpencil_cli::run::MANIFEST_FILE).display()
            );
            if m.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
