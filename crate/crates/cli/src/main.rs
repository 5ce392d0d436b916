use std::process::ExitCode;

use clap::Parser;

use blowup_cli::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match blowup_cli::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
