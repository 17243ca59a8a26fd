//! Library side of the `oi-assim` command-line tool: configuration, the
//! subcommands, and the run report.

pub mod commands;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

pub use commands::{cmd_assimilate, cmd_evaluate, cmd_generate, cmd_osse, cmd_sweep};
pub use config::RunConfig;
pub use report::Report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] oi_assim::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Short machine-readable class of the failure.
    pub fn category(&self) -> &'static str {
        use oi_assim::Error as E;
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e.root() {
                E::Io { .. } => "io",
                E::Format { .. } => "format",
                E::Singular { .. } => "numerical",
                E::GridMismatch(_) | E::StepMismatch { .. } => "mismatch",
                _ => "validation",
            },
        }
    }

    /// `error category=<cat>: <message>` on one line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error category={}: {msg}", self.category())
    }
}
