//! `featcomp` command-line tool.

mod commands;

use std::process::ExitCode;

use clap::{CommandFactory, Parser};

use commands::Cli;
use featcomp::Error;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_DATA: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Format(_) | Error::Decode(_) | Error::Json(_) => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Numeric(_) => "numeric",
        Error::Format(_) => "format",
        Error::IncompatibleModel { .. } => "incompatible_model",
        Error::Decode(_) => "decode",
        Error::Protocol(_) => "protocol",
        Error::Remote { .. } => "remote",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").to_string();
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            println!("{}", Cli::command().render_usage());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", kind(&e), one_line(&e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
