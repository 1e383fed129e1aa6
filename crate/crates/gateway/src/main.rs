use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use trialwatch_gateway::cli::{execute, Cli};

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("TRIALWATCH_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    execute(Cli::parse())
}
