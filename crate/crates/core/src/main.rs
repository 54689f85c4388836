use std::process::ExitCode;

use clap::Parser;
use doss_core::cli::{execute, Cli};
use doss_core::Error;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DOSS_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(match e {
                Error::Config(_) | Error::Format { .. } => 2,
                Error::Io { .. } => 3,
                _ => 1,
            })
        }
    }
}
