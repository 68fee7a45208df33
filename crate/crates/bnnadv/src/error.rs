use std::io;
use std::path::PathBuf;

/// Errors raised by file formats, the harness and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] bnnadv_core::Error),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: io::Error },
    /// Malformed binary input; `offset` is the byte position where parsing failed.
    #[error("{}: format error at byte {offset}: {detail}", .path.display())]
    Format { path: PathBuf, offset: u64, detail: String },
    /// Malformed text input (config files, manifests).
    #[error("{}:{line}: {detail}", .path.display())]
    Parse { path: PathBuf, line: usize, detail: String },
    #[error("{0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
