use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition (shape mismatch,
    /// out-of-range label, empty input, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numeric quantity that must be finite was NaN or infinite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A data file could not be ingested; `row` is the 1-based data row.
    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },

    /// An experiment or federation configuration is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// Every performance score in a round was zero, so weights cannot be
    /// normalized. Signals a broken evaluation round.
    #[error("degenerate weights: all performance scores are zero at round {round}")]
    DegenerateWeights { round: usize },

    /// A wire message violated the protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A transport-level failure (connect, timeout, connection loss).
    #[error("transport error: {0}")]
    Transport(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code category for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::InvalidInput(_) => 3,
            Error::Ingestion { .. } => 4,
            Error::Numeric(_) => 5,
            Error::DegenerateWeights { .. } => 6,
            Error::Protocol(_) => 7,
            Error::Transport(_) => 8,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
