// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid dimensions, lengths, grids or other configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity appeared in an activation, gradient or output.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A site, token or component index outside the model's grid.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// Training loss became non-finite.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    /// An inverse problem with no admissible solution.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("checkpoint has bad magic bytes {found:?}, expected \"RFTC\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found}, this build reads version {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("checkpoint manifest error: {0}")]
    Manifest(String),

    #[error("unknown experiment id `{0}`")]
    UnknownExperiment(String),

    #[error("acceptance threshold failed: {0}")]
    Threshold(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error: 1 usage/config, 2 numeric, 3 threshold.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Divergence { .. } => 2,
            Error::Threshold(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
