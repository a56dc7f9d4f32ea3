use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use runmax::commands::{cmd_density, cmd_price, cmd_selftest, cmd_verify, Outcome, RunOptions, EXIT_ERROR};
use runmax::{configure_threads, OUT_DIR_ENV};

/// Joint law of a diffusion and its running maximum: densities,
/// weak-form verification and lookback pricing.
#[derive(Debug, Parser)]
#[command(name = "runmax", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed overriding the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "runmax-out")]
    out: PathBuf,
    /// Multiplier applied to every verification error estimate.
    #[arg(long, global = true)]
    gate_scale: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the kernel-algebra property suite.
    Selftest,
    /// Compute the configured density and write it as CSV.
    Density {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check one density (or the difference of two) against the weak PDE,
    /// the boundary condition and the membership diagnostics.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(required = true, num_args = 1..=2)]
        densities: Vec<PathBuf>,
    },
    /// Price lookback and barrier quantities by density and by simulation.
    Price {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads(cli.threads);
    let opts = RunOptions { out_dir: cli.out.clone(), seed: cli.seed, gate_scale: cli.gate_scale };
    let result = match &cli.command {
        Command::Selftest => cmd_selftest(&opts),
        Command::Density { config } => cmd_density(config, &opts),
        Command::Verify { config, densities } => cmd_verify(densities, config, &opts),
        Command::Price { config } => cmd_price(config, &opts),
    };
    match result {
        Ok(Outcome { exit_code, lines }) => {
            // A closed pipe on stdout must not change the exit code.
            let mut stdout = std::io::stdout().lock();
            for l in lines {
                if writeln!(stdout, "{l}").is_err() {
                    break;
                }
            }
            ExitCode::from(exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
