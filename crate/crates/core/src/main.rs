use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sortline_resilience::cli::{self, CliError, Overrides, Sink};

/// Sorting-line simulator with contract-based resilience managers.
#[derive(Parser)]
#[command(name = "sortline", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its trace and metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// JSONL trace destination (`-` for stdout).
        #[arg(long)]
        trace: Option<String>,
        /// Metrics destination (`-` for stdout).
        #[arg(long, default_value = "-")]
        metrics: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Force the resilience managers off.
        #[arg(long)]
        no_rm: bool,
    },
    /// Run a scenario with RMs off and on and report both.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "-")]
        metrics: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse and validate a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.command {
        Command::Run {
            scenario,
            trace,
            metrics,
            seed,
            no_rm,
        } => {
            let trace = trace.as_deref().map(Sink::parse);
            let overrides = Overrides { seed, no_rm };
            cli::run(&scenario, trace.as_ref(), &Sink::parse(&metrics), &overrides).map(|_| ())
        }
        Command::Compare { scenario, metrics, seed } => {
            let overrides = Overrides { seed, no_rm: false };
            cli::compare(&scenario, &Sink::parse(&metrics), &overrides).map(|_| ())
        }
        Command::Validate { scenario } => cli::validate(&scenario).map(|s| {
            println!("ok: {}", s.name.as_deref().unwrap_or("scenario"));
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}
