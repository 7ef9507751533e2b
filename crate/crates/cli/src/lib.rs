//! The `qcnn` command-line tool: data preparation, training, sweeps,
//! clean and noisy evaluation, baselines and verification.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;

use std::path::Path;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_CAPABILITY: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

/// An error with the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(EXIT_FAILURE, format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<qcnn_core::Error> for CliError {
    fn from(e: qcnn_core::Error) -> Self {
        use qcnn_core::Error as E;
        let code = match &e {
            E::Io { .. }
            | E::BadMagic { .. }
            | E::TruncatedFile { .. }
            | E::DimensionMismatch(_)
            | E::CacheFormat { .. }
            | E::BadLabel(_)
            | E::EmptyDataset
            | E::ZeroVector { .. }
            | E::InvalidPixel(_)
            | E::WrongShape { .. } => EXIT_DATA,
            E::InvalidConfig(_)
            | E::EmptyGrid
            | E::BadCopyCount(_)
            | E::BadConstantTerm(_)
            | E::DuplicateQubit(_)
            | E::QubitOutOfRange { .. } => EXIT_CONFIG,
            E::ExactModeTooLarge { .. } => EXIT_CAPABILITY,
            E::OracleSelfDisagreement { .. } => EXIT_VERIFY,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}
