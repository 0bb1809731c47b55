use std::process::ExitCode;

use clap::Parser;
use hsunmix::cli::{self, Cli, CliError, Outcome};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let allow_nonconverged = cli.allow_nonconverged;
    match cli::run(cli) {
        Ok(Outcome::Completed) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) if allow_nonconverged => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => {
            eprintln!("hsunmix: solver did not converge; outputs were written (pass --allow-nonconverged to exit 0)");
            ExitCode::from(EXIT_NOT_CONVERGED)
        }
        Err(e @ CliError::Usage(_)) => {
            eprintln!("hsunmix: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            eprintln!("hsunmix: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
