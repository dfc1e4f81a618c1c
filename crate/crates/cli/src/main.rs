use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match rana_cli::run(rana_cli::Cli::parse()) {
        Ok(text) => {
            if !text.is_empty() {
                println!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
