use std::io;
use std::path::{Path, PathBuf};

use lifecycle_audit_core::CaptureError;

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    /// An input file is present but violates its schema or invariants.
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
    #[error("{0}")]
    Validation(String),
    #[error("{}: {source}", path.display())]
    Capture {
        path: PathBuf,
        #[source]
        source: CaptureError,
    },
    #[error("capture subprocess: {0}")]
    CaptureProcess(String),
    #[error("no usable captures in the corpus ({quarantined} quarantined)")]
    NoUsableCaptures { quarantined: usize },
    #[error("bundles share no devices")]
    DisjointDevices,
    #[error("probe: {0}")]
    Probe(String),
}

impl AuditError {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        AuditError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn invalid(path: impl AsRef<Path>, message: impl ToString) -> Self {
        AuditError::Invalid {
            path: path.as_ref().to_path_buf(),
            message: message.to_string(),
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>, AuditError> {
    std::fs::read(path).map_err(|e| AuditError::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String, AuditError> {
    std::fs::read_to_string(path).map_err(|e| AuditError::io(path, e))
}

/// Writes through a sibling temporary file so readers never see a torn file.
pub(crate) fn write_atomic(path: &Path, data: &[u8]) -> Result<(), AuditError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, data).map_err(|e| AuditError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| AuditError::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<(), AuditError> {
    std::fs::create_dir_all(path).map_err(|e| AuditError::io(path, e))
}
