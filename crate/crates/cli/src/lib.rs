//! The `cada` command line front end. Each subcommand reads and writes
//! files only, so stages can be rerun independently.

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub mod args;
pub mod files;
pub mod heads;
pub mod pipeline;
pub mod reports;
pub mod tools;

use args::{Cli, Command};
use cada_core::ErrorKind;

/// Malformed invocation detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check of numerical correctness failed.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Exit code for an error: the first recognised cause in the chain decides.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<NumericalFailure>() {
            return EXIT_NUMERICAL;
        }
        if let Some(e) = cause.downcast_ref::<cada_core::Error>() {
            return match e.kind() {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numerical => EXIT_NUMERICAL,
            };
        }
    }
    EXIT_DATA
}

pub fn execute(cmd: &Command) -> anyhow::Result<()> {
    match cmd {
        Command::Gen(a) => pipeline::gen(a),
        Command::FitBase(a) => pipeline::fit_base(a),
        Command::Score(a) => pipeline::score(a),
        Command::Stats(a) => pipeline::stats(a),
        Command::TrainHead(a) => heads::train_head(a),
        Command::Align(a) => heads::align(a),
        Command::Eval(a) => reports::eval(a),
        Command::Report(a) => reports::report(a),
        Command::GradCheck(a) => tools::grad_check_cmd(a),
        Command::Ablate(a) => tools::ablate(a),
    }
}

/// One-line message of an error chain. Causes already quoted by the
/// message before them are skipped.
pub fn diagnostic(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if parts.last().is_some_and(|p| p.contains(&text)) {
            continue;
        }
        parts.push(text);
    }
    parts.join(": ")
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", diagnostic(&e));
            exit_code(&e)
        }
    }
}
