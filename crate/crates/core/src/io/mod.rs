//! File formats: MVOL volumes and fields, series manifests, checkpoints,
//! the JSONL loss trace, and configuration hashing.

mod checkpoint;
mod manifest;
mod mvol;

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_DATA, CHECKPOINT_JSON};
pub use manifest::{load_series, SeriesManifest, SessionEntry};
pub use mvol::{
    header_path, read_field, read_mask, read_raw, read_volume, save_field, save_mask, save_volume, write_field,
    write_volume, MvolHeader, Provenance, Units, MAGIC,
};

use crate::error::{Error, Result};

/// Pretty JSON with a trailing newline.
pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    mvol::write_json(path, value)
}

pub fn read_json_file<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    mvol::read_json(path)
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configs serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Append-only JSON-lines writer, flushed after every record.
pub struct JsonlWriter {
    path: std::path::PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

impl JsonlWriter {
    /// Creates (truncating) `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            file: std::io::BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let io = |source| Error::Io {
            path: self.path.clone(),
            source,
        };
        let line = serde_json::to_string(record).map_err(|source| Error::Json {
            path: self.path.clone(),
            source,
        })?;
        writeln!(self.file, "{line}").map_err(io)?;
        self.file.flush().map_err(|source| Error::Io {
            path: self.path.clone(),
            source,
        })
    }
}
