use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use dsran::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(outcome.stdout.as_bytes());
            if !outcome.stdout.is_empty() && !outcome.stdout.ends_with('\n') {
                let _ = stdout.write_all(b"\n");
            }
            ExitCode::from(outcome.code)
        }
        Err(err) => {
            eprintln!("error: {}: {err}", err.name());
            ExitCode::from(exit_code(&err))
        }
    }
}
