use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qbath::app::{self, Command, Options};

/// Exact simulation of a small quantum system coupled to a finite bath.
#[derive(Parser)]
#[command(name = "qbath", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Realize the bath, diagonalize the universe Hamiltonian, write the cache.
    Build(Common),
    /// Evolve the configured initial state and write populations over time.
    Evolve(Common),
    /// Eigenstate values, moving averages, overlaps and the ETH summary.
    Eth(Common),
    /// Boltzmann populations of the system at the bath temperature.
    Thermal(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config, or a manifest JSON written by a previous run.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// NAME=VALUE, with NAME one of coupling_seed, phase_seed. Repeatable.
    #[arg(long = "seed-override", value_name = "NAME=VALUE")]
    seed_overrides: Vec<String>,
    /// Print estimates and write nothing.
    #[arg(long)]
    dry_run: bool,
    /// Worker threads; 0 picks automatically. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Memory ceiling such as 4G; defaults to 90% of physical memory.
    #[arg(long, value_name = "SIZE")]
    memory_limit: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Build(c) => (Command::Build, c),
        Sub::Evolve(c) => (Command::Evolve, c),
        Sub::Eth(c) => (Command::Eth, c),
        Sub::Thermal(c) => (Command::Thermal, c),
    };
    let result = common
        .memory_limit
        .as_deref()
        .map(app::parse_size)
        .transpose()
        .and_then(|memory_limit| {
            let opts = Options {
                config: common.config,
                output_dir: common.output_dir,
                seed_overrides: common.seed_overrides,
                dry_run: common.dry_run,
                threads: common.threads,
                memory_limit,
            };
            app::run(command, &opts)
        });
    match result {
        Ok(outcome) => {
            for line in &outcome.report {
                println!("{line}");
            }
            if let Some(path) = outcome.manifest {
                println!("manifest: {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
