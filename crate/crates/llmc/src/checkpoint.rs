//! Checkpoint files: the core's self-describing checkpoint bytes written
//! verbatim to disk. The content hash inside the format makes the file
//! self-verifying on load.

use std::path::Path;

use llmc_core::model::{parse_checkpoint, Checkpoint, Model};

use crate::io::{atomic_write, FileError, FileResult};

pub fn save_checkpoint(path: &Path, model: &Model) -> FileResult<()> {
    atomic_write(path, &model.to_checkpoint_bytes())
}

pub fn load_checkpoint(path: &Path) -> FileResult<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| FileError::Io { path: path.display().to_string(), source: e })?;
    parse_checkpoint(&bytes).map_err(FileError::Core)
}
