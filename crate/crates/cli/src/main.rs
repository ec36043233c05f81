use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match streamtag_cli::run(streamtag_cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
