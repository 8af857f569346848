use std::process::ExitCode;

use clap::Parser;
use sss::cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sss: {e}");
            e.exit_code()
        }
    }
}
