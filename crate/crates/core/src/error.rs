use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("step {step} outside [0, {max}]")]
    Range { step: usize, max: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("conditional score is singular at step {0} (1 - Φ = 0)")]
    SingularTarget(usize),

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingFailure { step: usize, loss: f64 },

    #[error("non-finite state or score at step {step} for sample {sample}")]
    Propagation { step: usize, sample: usize },

    #[error("{aborted} of {total} samples aborted (limit 1%)")]
    TooManyAborts { aborted: usize, total: usize },

    #[error("expected a {expected} ensemble")]
    Direction { expected: &'static str },

    #[error("sample size {got} below the minimum of {min}")]
    SampleSize { got: usize, min: usize },

    #[error("zero normalizer for {0}")]
    DegenerateNormalization(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::TrainingFailure { .. }
                | Error::Propagation { .. }
                | Error::TooManyAborts { .. }
                | Error::SingularTarget(_)
                | Error::DegenerateData(_)
                | Error::DegenerateNormalization(_)
        )
    }
}
