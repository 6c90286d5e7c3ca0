use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimMismatch { what: &'static str, expected: usize, got: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error("unknown attack `{0}`")]
    UnknownAttack(String),

    #[error("policy bundle has no usable Q-function")]
    MissingQ,

    #[error("attack `{0}` requires online interaction and cannot build an offline dataset")]
    OnlineOnly(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("empty candidate grid")]
    EmptyGrid,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownEnv(_) | Error::UnknownAttack(_) | Error::Invalid(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Divergence(_) | Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimMismatch { what, expected, got })
    }
}

pub(crate) fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
