//! `provnet <experiment> [--config <path>] [--key=value ...] --out <dir>`

use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match provnet::harness::cli_main(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(provnet::harness::exit_code(&e))
        }
    }
}
