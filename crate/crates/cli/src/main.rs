// SPDX-License-Identifier: MIT OR Apache-2.0

use std::process::ExitCode;

use clap::Parser;
use latentscope_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for path in &outcome.written {
                println!("{}", path.display());
            }
            if cli.common.strict && !outcome.degeneracy_flags.is_empty() {
                for flag in &outcome.degeneracy_flags {
                    eprintln!("degenerate: {flag}");
                }
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
