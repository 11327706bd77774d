use std::process::ExitCode;

use clap::Parser;
use ssldetr::cli::{error_json, exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if cli.error_json {
                eprintln!("{}", error_json(&err));
            } else {
                eprintln!("error: {err}");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
