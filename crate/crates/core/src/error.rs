use thiserror::Error;

/// Errors surfaced by the simulator.
///
/// The CLI maps `Config`/`Input` to exit code 2 and `Numerical` to exit
/// code 3; everything else exits 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    /// A cross-module contract was violated (e.g. a label without an anchor).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Non-finite value encountered; the affected round is aborted.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed binary/CSV input; the message names the byte offset where known.
    #[error("format error: {0}")]
    Format(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}
