use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use rate_alloc::cli::{run_command, Command, Overrides};
use rate_alloc::config::ScenarioConfig;

/// Allocate a shared sampling capacity across sensors of a coupled linear network.
#[derive(Debug, Parser)]
#[command(name = "rate-alloc", version)]
struct Args {
    /// Scenario file (JSON with network, problem and solver sections).
    #[arg(long)]
    config: PathBuf,
    /// Directory for result files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum)]
    command: Command,
    /// Number of sweep grid points; overrides problem.grid_size.
    #[arg(long)]
    grid: Option<usize>,
    /// Stationarity tolerance; overrides solver.tol.
    #[arg(long)]
    tol: Option<f64>,
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("RATE_ALLOC_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("RATE_ALLOC_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let config = match ScenarioConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let overrides = Overrides {
        grid: args.grid,
        tol: args.tol,
    };
    match run_command(args.command, &config, &args.out, &overrides) {
        Ok(output) => {
            println!("{}", output.summary);
            for f in &output.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
