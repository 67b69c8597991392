use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mixdl::cli::Cli::parse();
    match mixdl::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
