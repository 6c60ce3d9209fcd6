use std::path::PathBuf;

use thiserror::Error;

use crate::replay::ReplayResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure surfaced by the repository, runner, certification and
/// interchange layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("storage error: {0}")]
    Storage(String),
    #[error("metadata conflict for {id}: {message}")]
    MetaConflict { id: String, message: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("cycle: {0}")]
    Cycle(String),
    #[error("duplicate producer: artifact {artifact} is already produced by {existing}")]
    DuplicateProducer { artifact: String, existing: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("step failed ({reason}); staging kept at {}", staging.display())]
    StepFailed {
        reason: String,
        exit_status: Option<i32>,
        stdout: Vec<u8>,
        stderr: Vec<u8>,
        staging: PathBuf,
    },
    #[error("missing output: {name} was not produced; staging kept at {}", staging.display())]
    MissingOutput { name: String, staging: PathBuf },
    #[error("format error: {0}")]
    Format(String),
    #[error("registrar error: {0}")]
    Registrar(String),
    #[error("uncertifiable: {0}")]
    Uncertifiable(String),
    #[error("not replayable: {0}")]
    NotReplayable(String),
    #[error("replay error: {message}")]
    Replay {
        message: String,
        /// Results of the steps that completed before the failure.
        completed: Vec<ReplayResult>,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("document is not in canonical form: {0}")]
    CanonicalForm(String),
    #[error("repository lock: {0}")]
    Lock(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Attach a path to `std::io::Result`s.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
