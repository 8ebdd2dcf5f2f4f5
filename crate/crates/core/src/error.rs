use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible CTC target: {labels} labels with {repeats} adjacent repeats need {needed} frames, only {frames} available")]
    InfeasibleTarget {
        labels: usize,
        repeats: usize,
        needed: usize,
        frames: usize,
    },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Format { .. }
            | Error::Data(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::InfeasibleTarget { .. }
            | Error::Dimension { .. } => 2,
            Error::Numeric { .. } => 3,
        }
    }
}
