//! Configuration-driven front end for the FGA engine.

pub mod commands;
pub mod config;
pub mod report;

use fga_core::FgaError;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const RESOURCE: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: FgaError,
    },
    #[error("check failed: {0}")]
    Failure(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn stage(stage: &'static str) -> impl FnOnce(FgaError) -> Self {
        move |source| Self::Stage { stage, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io(_) => exit::CONFIG,
            Self::Failure(_) => exit::NUMERIC,
            Self::Stage { source, .. } => match source {
                FgaError::InvalidInput(_)
                | FgaError::Format(_)
                | FgaError::Cutoff { .. }
                | FgaError::Resolution(_)
                | FgaError::QuadratureRisk(_)
                | FgaError::Io(_) => {
                    exit::CONFIG
                }
                FgaError::Resource(_) => exit::RESOURCE,
                _ => exit::NUMERIC,
            },
        }
    }
}
