//! `densekit`: one entry point for every pipeline stage.
//!
//! Exit status: 0 on success, 1 when flags, configuration, or inputs are
//! rejected before work starts, 2 when a run fails. Errors are one line on
//! standard error, prefixed `error[<kind>]:`.

mod commands;
mod config;
mod data;
mod error;
mod run;

use clap::error::ErrorKind;
use clap::Parser;

use crate::commands::{dispatch, Cli};
use crate::error::CliError;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            let err = CliError::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{err}");
            std::process::exit(err.exit_code());
        }
    };
    if let Err(err) = dispatch(cli.command) {
        eprintln!("{err}");
        std::process::exit(err.exit_code());
    }
}
