use std::process::ExitCode;

use clap::Parser;
use dopq_cli::commands::{dispatch, Cli};
use dopq_cli::CliError;

/// Applies `DOPQ_THREADS` as the global thread cap.
fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("DOPQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("DOPQ_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Invariant(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|()| dispatch(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dopq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
