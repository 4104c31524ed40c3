mod args;
mod bench;
mod commands;
mod job;
mod manifest;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;
use fepll::FepllError;

use args::{Cli, Command};

/// Invalid combination of otherwise well-formed arguments.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(FepllError::Numerical(_)) = cause.downcast_ref::<FepllError>() {
            return EXIT_NUMERICAL;
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command: Vec<String> = std::env::args().collect();
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Import(a) => commands::import(a),
        Command::Flatten(a) => commands::flatten(a),
        Command::BuildTree(a) => commands::build_tree_cmd(a),
        Command::Restore(a) => commands::restore_cmd(a, command),
        Command::Replay(a) => commands::replay(a),
        Command::Degrade(a) => commands::degrade(a),
        Command::Benchmark(a) => bench::benchmark(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
