use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fbsde_smp::Error;
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Solver(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Solver(_) | CliError::Io(_) => 3,
        }
    }

    pub fn solver(context: &str) -> impl Fn(Error) -> CliError + '_ {
        move |e| match e {
            Error::Config(m) => CliError::Usage(m),
            Error::InvalidArgument(m) => CliError::Usage(format!("{context}: {m}")),
            e => CliError::Solver(format!("{context}: {e}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Solver(m) => write!(f, "solver error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

pub struct Output {
    pub path: Option<PathBuf>,
    pub timing: bool,
    pub quiet: bool,
}

#[derive(Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
}

pub fn check(name: &'static str, pass: bool) -> Check {
    Check { name, pass }
}

#[derive(Serialize)]
struct RunReport<'a, C: Serialize, R: Serialize> {
    command: &'a str,
    version: &'static str,
    config: &'a C,
    result: &'a R,
    checks: &'a [Check],
    pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time_s: Option<f64>,
}

impl Output {
    /// Writes the report and returns whether every check passed.
    pub fn emit<C: Serialize, R: Serialize>(
        &self,
        command: &str,
        started: Instant,
        config: &C,
        result: &R,
        checks: &[Check],
        summary: &str,
    ) -> Result<bool, CliError> {
        let pass = checks.iter().all(|c| c.pass);
        let report = RunReport {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            result,
            checks,
            pass,
            wall_time_s: self.timing.then(|| started.elapsed().as_secs_f64()),
        };
        let mut text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        match &self.path {
            Some(p) => write_file(p, &text)?,
            None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))?,
        }
        if !self.quiet {
            eprint!("{summary}");
            for c in checks {
                eprintln!("{:<28} {}", c.name, if c.pass { "pass" } else { "FAIL" });
            }
        }
        Ok(pass)
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
