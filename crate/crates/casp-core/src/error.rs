//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaspError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint or calibration file violates the on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// A precondition on operation inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numerical routine failed (Cholesky, SVD, bisection).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Pipeline stage wrapper so CLI failures name the failing stage.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CaspError>,
    },
}

impl CaspError {
    pub fn format(msg: impl Into<String>) -> Self {
        CaspError::Format(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CaspError::InvalidInput(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CaspError::Numerical(msg.into())
    }

    /// Tag an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        CaspError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, CaspError>;

/// Extension for tagging stage context onto results.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
