//! Configuration, orchestration and reporting behind the `npqr` binary.

pub mod config;
pub mod run;
pub mod simulate;

use thiserror::Error;

use crate::basis::BasisError;
use crate::dataio::DataError;
use crate::functional::LoadError;
use crate::inference::InferenceError;
use crate::qrfit::QrError;
use crate::rearrange::RearrangeError;

pub use config::RunConfig;
pub use run::{estimate, prepare, read_surface, render_table, write_surface, Model};
pub use simulate::{simulate, CoverageReport};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataio: {0}")]
    Data(#[from] DataError),
    #[error("basis: {0}")]
    Basis(#[from] BasisError),
    #[error("functional: {0}")]
    Load(#[from] LoadError),
    #[error("qrfit: {0}")]
    Fit(#[from] QrError),
    #[error("inference: {0}")]
    Inference(#[from] InferenceError),
    #[error("rearrange: {0}")]
    Rearrange(#[from] RearrangeError),
    #[error("output: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 2 for configuration and data problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Fit(_) | CliError::Rearrange(_) => 3,
            CliError::Inference(e) => match e {
                InferenceError::Config(_)
                | InferenceError::TooFewDraws { .. }
                | InferenceError::ConditionalBootstrap(_)
                | InferenceError::Dimension(_)
                | InferenceError::Load(_) => 2,
                _ => 3,
            },
            _ => 2,
        }
    }
}
