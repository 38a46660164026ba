use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    /// A file that exists but does not parse; names the offending field.
    #[error("{}: {field}: {msg}", path.display())]
    Format { path: PathBuf, field: &'static str, msg: String },
    #[error(transparent)]
    Core(#[from] instadepth_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Verification(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 1 verification failure, 2 usage, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Usage(_) | Error::Core(instadepth_core::Error::Config(_)) => 2,
            Error::Core(_) | Error::Verification(_) => 1,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn format_err(path: &Path, field: &'static str, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field,
        msg: msg.into(),
    }
}
