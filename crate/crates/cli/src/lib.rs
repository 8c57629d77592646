//! Batch experiments on top of `sfuq-core`: configuration files, the
//! experiment runners and their CSV/JSON output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
pub mod output;

pub use config::{ExperimentConfig, ExperimentKind};
pub use experiments::{run, ExperimentOutput};
pub use output::{write_outputs, ExperimentReport, ReportEntry};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Solver {
        context: String,
        #[source]
        source: sfuq_core::Error,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver { .. } => 3,
            CliError::Io(_) => 1,
        }
    }

    pub(crate) fn solver(context: impl Into<String>, source: sfuq_core::Error) -> Self {
        match source {
            sfuq_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Solver {
                context: context.into(),
                source: other,
            },
        }
    }
}

impl From<sfuq_core::Error> for CliError {
    fn from(e: sfuq_core::Error) -> Self {
        match e {
            sfuq_core::Error::Config(_)
            | sfuq_core::Error::Domain(_)
            | sfuq_core::Error::Reduction(_)
            | sfuq_core::Error::InsufficientSamples { .. } => CliError::Config(e.to_string()),
            sfuq_core::Error::Io(e) => CliError::Io(e.to_string()),
            sfuq_core::Error::Csv(e) => CliError::Io(e.to_string()),
            other => CliError::Solver {
                context: "solver".into(),
                source: other,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
