//! `cxr`: one binary for every pipeline stage.

mod args;
mod commands;
mod error;

use std::io::IsTerminal;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, LogFormat};

fn init_logging(format: LogFormat, quiet: bool) {
    let level = if quiet { tracing::Level::WARN } else { tracing::Level::INFO };
    let builder = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_max_level(level);
    match format {
        LogFormat::Text => builder.init(),
        LogFormat::Json => builder.json().init(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    init_logging(cli.global.log, cli.global.quiet);
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match cli.global.log {
                LogFormat::Text => eprintln!("cxr: {e}"),
                LogFormat::Json => eprintln!(
                    "{}",
                    serde_json::json!({"error": e.category.name(), "exit_code": e.category.exit_code(), "message": e.message})
                ),
            }
            e.exit()
        }
    }
}
