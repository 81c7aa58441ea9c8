use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] headpurify_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0} check(s) failed")]
    Verify(usize),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl std::fmt::Display) -> Error {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    /// 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Core(headpurify_core::Error::NonFinite(_)) | Error::Verify(_) => 2,
            _ => 1,
        }
    }
}
