use thiserror::Error;

/// Errors raised anywhere in the federation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, layouts or hyperparameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),
    /// Bad caller-supplied data (labels out of range, empty sets, ...).
    #[error("input error: {0}")]
    Input(String),
    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An object was used after the state it depends on changed.
    #[error("state error: {0}")]
    State(String),
    /// Malformed binary file.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// An error raised while running a particular round of an experiment.
    #[error("round {round}: {source}")]
    Round {
        round: u64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn input(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}

impl Error {
    /// Attaches the round in which the error happened.
    pub fn at_round(self, round: u64) -> Error {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}
