//! Experimenter driver: stimulus preprocessing, serving, analysis and cost
//! estimates. The `bubbleview` binary is a thin clap front end over this.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyze;
pub mod cost;
pub mod manifest;
pub mod preprocess;
pub mod serve;

use std::path::Path;

use thiserror::Error;

pub use manifest::RunManifest;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const VALIDATION: u8 = 2;
    pub const PARTIAL: u8 = 3;
    pub const IO: u8 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    /// Outputs were written but some inputs failed.
    #[error("{} input(s) failed:\n  {}", .0.len(), .0.join("\n  "))]
    Partial(Vec<String>),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => exit::VALIDATION,
            CliError::Io(_) => exit::IO,
            CliError::Partial(_) => exit::PARTIAL,
        }
    }
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    use std::io::Write;
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub(crate) fn comment_block(lines: &[String]) -> String {
    lines.iter().map(|l| format!("# {l}\n")).collect()
}
