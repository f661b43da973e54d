use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = cbx::Cli::try_parse().unwrap_or_else(|e| e.exit());
    match cbx::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
