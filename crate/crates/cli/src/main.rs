//! `dpo-lab` command-line entry point.
//!
//! Exit status: 0 on success, 2 on usage errors, 1 on runtime or output errors.

use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(failure) => failure.report(),
    }
}
