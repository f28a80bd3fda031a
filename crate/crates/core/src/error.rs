use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("channel error: {0}")]
    Channel(String),

    /// Malformed file contents. `offset` is the byte position where decoding failed.
    #[error("parse error at byte {offset}{}: {message}", record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Parse {
        offset: u64,
        record: Option<usize>,
        message: String,
    },

    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short stable tag, used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Topology(_) => "topology",
            Error::Argument(_) => "argument",
            Error::DegenerateGeometry(_) => "degenerate-geometry",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Generation(_) => "generation",
            Error::Render(_) => "render",
            Error::Channel(_) => "channel",
            Error::Parse { .. } => "parse",
            Error::NonFinite { .. } => "non-finite",
            Error::Load(_) => "load",
            Error::Io(_) => "io",
        }
    }
}
