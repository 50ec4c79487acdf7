use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pflego_cli::config::{Overrides, RunConfig};
use pflego_cli::{compare_runs, default_run_dir, print_comparison, run, verify, UsageError};

#[derive(Parser)]
#[command(
    name = "pflego",
    version,
    about = "Personalized federated learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.csv, summary.json and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<u64>,
        #[arg(long)]
        algorithm: Option<String>,
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory; must not exist yet.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record per-round wall time (makes rounds.csv non-reproducible).
        #[arg(long)]
        wall_time: bool,
    },
    /// Compare the final windows of two runs.
    Compare { a: PathBuf, b: PathBuf },
    /// Check gradient unbiasedness and oracle equivalence on a config's federation.
    Verify {
        #[arg(long)]
        config: PathBuf,
    },
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seed,
            rounds,
            algorithm,
            threads,
            out,
            wall_time,
        } => {
            let overrides = Overrides {
                seed,
                rounds,
                algorithm,
                threads,
            };
            let cfg = RunConfig::load(&config, &overrides)?;
            let dir = out.unwrap_or_else(|| default_run_dir(&cfg));
            let summary = run(&cfg, &dir, wall_time)?;
            println!(
                "{}: final-window loss {:.6} ± {:.6}, accuracy {:.4} ± {:.4} -> {}",
                summary.algorithm,
                summary.global_train_loss.mean,
                summary.global_train_loss.stddev,
                summary.mean_test_accuracy.mean,
                summary.mean_test_accuracy.stddev,
                dir.display()
            );
            Ok(true)
        }
        Command::Compare { a, b } => {
            let c = compare_runs(&a, &b)?;
            print_comparison(&c, std::io::stdout().lock())?;
            Ok(true)
        }
        Command::Verify { config } => {
            let cfg = RunConfig::load(&config, &Overrides::default())?;
            let checks = verify(&cfg)?;
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
