//! Front end for `matzoh-core`: run configuration, the evolve → gate →
//! classify → geometry pipeline, JSON reports and CSV plot data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod report;

use std::fmt;

use matzoh_core::Error;

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    Config = 1,
    NotInvariant = 2,
    Mixed = 3,
    Numerical = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    /// Classifies a core error: malformed input is a configuration error,
    /// a failed gate is `NotInvariant`, anything else is numerical.
    pub fn of(err: &Error) -> Self {
        match err {
            Error::InvalidGrid(_)
            | Error::InvalidField(_)
            | Error::InvalidBody(_)
            | Error::InvalidOperator(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::AxisTooSmall { .. }
            | Error::SupportAtOrigin => Self::Config,
            Error::NotInvariant { .. } => Self::NotInvariant,
            _ => Self::Numerical,
        }
    }
}

/// An error tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct CliError {
    pub status: ExitStatus,
    pub stage: String,
    pub message: String,
}

impl CliError {
    pub fn new(status: ExitStatus, stage: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status,
            stage: stage.into(),
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ExitStatus::Config, "config", message)
    }

    pub fn core(stage: &str, err: Error) -> Self {
        Self::new(ExitStatus::of(&err), stage, err.to_string())
    }

    pub fn io(stage: &str, err: impl fmt::Display) -> Self {
        Self::new(ExitStatus::Config, stage, err.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

/// Attaches a stage name to core results.
pub trait Stage<T> {
    fn stage(self, name: &str) -> Result<T, CliError>;
}

impl<T> Stage<T> for matzoh_core::Result<T> {
    fn stage(self, name: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::core(name, e))
    }
}
