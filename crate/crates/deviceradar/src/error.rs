use std::path::PathBuf;

/// Crate-wide error type. Variants map to the stage that produced them so the
/// CLI can surface which part of the pipeline failed.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file. `line` is 1-based; 0 means the failure is not
    /// tied to a specific line (e.g. a bad magic number).
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("ip total length {0} outside [20, 1500]")]
    SizeOutOfRange(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty model: {0}")]
    EmptyModel(String),

    #[error("negative sampling: {0}")]
    Sampling(String),

    #[error("training: {0}")]
    Training(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("table compilation: {0}")]
    Compile(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("model file: {0}")]
    Model(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
