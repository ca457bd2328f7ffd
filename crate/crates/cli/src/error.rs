use std::path::PathBuf;

use thiserror::Error;

/// Failures of the archive reader and writer.
#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("corrupt archive {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("archive {path} has format `{found}`, this build reads `{expected}`; re-save it with a matching release or convert it with `sdaf` from that release")]
    Version {
        path: PathBuf,
        found: String,
        expected: &'static str,
    },

    #[error("archive {path} does not fit this run: archive has n = {archive_n} ({archive_len} values), run expects n = {run_n} ({run_len} values)")]
    Shape {
        path: PathBuf,
        archive_n: usize,
        archive_len: usize,
        run_n: usize,
        run_len: usize,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("malformed config {path}: {message}")]
    ConfigSyntax { path: PathBuf, message: String },

    #[error("invalid config key `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error(transparent)]
    Core(#[from] sdaf_core::Error),

    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl CliError {
    pub(crate) fn key(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::ConfigKey {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
