//! Command-line front end: `verify`, `gradcheck`, `cost` and `simulate`.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 for invalid
//! input.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;

use clap::Parser;
use ringseq::Executor;

pub mod args;
pub mod commands;
pub mod report;

use args::{Cli, Command, CommandKind};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum CliError {
    /// Bad flags, config file or shape; exit 2.
    Invalid(String),
    /// The run itself went wrong; exit 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Failed(_) => EXIT_FAIL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ringseq::Error> for CliError {
    fn from(e: ringseq::Error) -> Self {
        use ringseq::Error as E;
        match e {
            E::Config(_)
            | E::SequenceDivisibility { .. }
            | E::HeadDivisibility { .. }
            | E::Shape(_)
            | E::Dimension { .. } => CliError::Invalid(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

/// Reads `RINGSEQ_EXECUTOR`; unset means sequential.
pub fn executor_from_env() -> Result<Executor, CliError> {
    match std::env::var("RINGSEQ_EXECUTOR") {
        Ok(v) => Ok(v.parse()?),
        Err(std::env::VarError::NotPresent) => Ok(Executor::default()),
        Err(e) => Err(CliError::Invalid(format!("RINGSEQ_EXECUTOR: {e}"))),
    }
}

/// Parses `argv`, runs the command and writes the report. Returns the exit
/// code.
pub fn run<I, T>(argv: I, executor: Executor, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_PASS
            };
            let target: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match execute(cli.command, executor, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(
    command: Command,
    executor: Executor,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<i32, CliError> {
    let (kind, opts) = match command {
        Command::Verify(o) => (CommandKind::Verify, o),
        Command::Gradcheck(o) => (CommandKind::Gradcheck, o),
        Command::Cost(o) => (CommandKind::Cost, o),
        Command::Simulate(o) => (CommandKind::Simulate, o),
    };
    let opts = opts.merged()?;
    let outcome = match kind {
        CommandKind::Cost => commands::cost(&opts.cost_sweep())?,
        CommandKind::Verify => commands::verify(&opts.run_config(kind)?, executor)?,
        CommandKind::Gradcheck => commands::gradcheck(&opts.run_config(kind)?, executor)?,
        CommandKind::Simulate => commands::simulate(&opts.run_config(kind)?, executor)?,
    };
    for note in &outcome.notes {
        let _ = writeln!(stderr, "{note}");
    }
    let text = outcome.report.render(opts.format())?;
    match &opts.out {
        Some(path) => std::fs::write(path, &text)
            .map_err(|e| CliError::Invalid(format!("cannot write {}: {e}", path.display())))?,
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Failed(format!("writing report: {e}")))?,
    }
    let failures = outcome.report.failures();
    if failures.is_empty() {
        return Ok(EXIT_PASS);
    }
    let _ = writeln!(stderr, "{} failed:", kind.as_str());
    for c in failures {
        let _ = writeln!(stderr, "  {}", c.summary());
    }
    Ok(EXIT_FAIL)
}
