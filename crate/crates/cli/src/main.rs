mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use commands::{run, Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Core(xavt_core::Error::Io(e))) if e.kind() == std::io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("xavt: {e}");
            match e {
                CliError::Verification(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
