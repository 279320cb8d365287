//! Persistence: tensor containers, JSON config and report files.

mod checkpoint;
pub mod config;
pub mod container;
mod report;

pub use checkpoint::{
    dataset_from_bytes, dataset_to_bytes, load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint,
};
pub use config::{BitBudget, Config, DatasetConfig, StageConfig, ThresholdSetting};
pub use report::{emit_report, ComparisonReport, Deltas, ModelReport, SUMMARY_COLUMNS};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Reads an input file, reporting a missing file as [`Error::MissingInput`].
pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Serializes `value` as pretty JSON and writes it atomically.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
