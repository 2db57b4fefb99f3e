use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    /// Simulation produced non-finite state; carries step and time.
    #[error("blow-up at step {step} (t = {time}): {detail}")]
    BlowUp { step: usize, time: f64, detail: String },

    #[error("step limit of {0} reached before the end time")]
    StepLimit(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch for {path}: expected {expected:016x}, found {found:016x}")]
    Checksum { path: String, expected: u64, found: u64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::BlowUp { .. } | Error::StepLimit(_) | Error::Autodiff(_))
    }
}
