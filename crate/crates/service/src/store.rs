//! Append-only newline-delimited JSON store with a single writer.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use gbwb_core::annotation::AnnotationRecord;

use crate::error::{Result, ServiceError};

#[derive(Debug)]
pub struct Store {
    path: PathBuf,
    writer: Mutex<File>,
}

impl Store {
    /// Opens or creates the store. A trailing partial line left by an
    /// interrupted write is cut off so the next record starts on its own line.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::io(&path, e))?;
        let bytes = fs::read(&path).map_err(|e| ServiceError::io(&path, e))?;
        let complete = complete_prefix(&bytes).len();
        if complete < bytes.len() {
            tracing::warn!(
                "{}: dropping {} bytes of an incomplete trailing record",
                path.display(),
                bytes.len() - complete
            );
            file.set_len(complete as u64).map_err(|e| ServiceError::io(&path, e))?;
        }
        Ok(Self {
            path,
            writer: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record as a single line and syncs it to disk before
    /// returning.
    pub fn append(&self, record: &AnnotationRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record).map_err(|e| ServiceError::Internal(e.to_string()))?;
        line.push(b'\n');
        let mut file = self
            .writer
            .lock()
            .map_err(|_| ServiceError::Internal("store writer lock poisoned".into()))?;
        file.write_all(&line).map_err(|e| ServiceError::io(&self.path, e))?;
        file.sync_data().map_err(|e| ServiceError::io(&self.path, e))
    }

    /// Every complete line in append order.
    pub fn export(&self) -> Result<Vec<u8>> {
        let mut bytes = fs::read(&self.path).map_err(|e| ServiceError::io(&self.path, e))?;
        let complete = complete_prefix(&bytes).len();
        bytes.truncate(complete);
        Ok(bytes)
    }
}

fn complete_prefix(bytes: &[u8]) -> &[u8] {
    match bytes.iter().rposition(|&b| b == b'\n') {
        Some(i) => &bytes[..=i],
        None => &[],
    }
}
