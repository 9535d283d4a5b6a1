use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match ssldr::cli::run(ssldr::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
