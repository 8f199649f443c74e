//! Content-addressed response cache.
//!
//! Each request digest owns a slot with its own lock, so concurrent requests
//! for the same key are collapsed into one provider call while other keys
//! proceed independently. With a directory configured, each response is also
//! stored as one file named by its digest, holding the raw response bytes.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use sha2::{Digest, Sha256};

use crate::error::{CvrError, Result};

type Slot = Arc<Mutex<Option<Arc<[u8]>>>>;

#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    slots: Mutex<HashMap<String, Slot>>,
}

/// Hex SHA-256 over the length-prefixed parts.
pub fn request_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| CvrError::io(&dir, e))?;
        Ok(ResponseCache {
            dir: Some(dir),
            slots: Mutex::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn slot(&self, key: &str) -> Slot {
        self.slots
            .lock()
            .entry(key.to_owned())
            .or_default()
            .clone()
    }

    /// Returns the cached bytes for `key`, or runs `fetch`, checks the bytes
    /// with `validate`, and stores them. Rejected responses are not cached.
    pub fn get_or_fetch(
        &self,
        key: &str,
        fetch: impl FnOnce() -> Result<Vec<u8>>,
        validate: impl Fn(&[u8]) -> Result<()>,
    ) -> Result<Arc<[u8]>> {
        let slot = self.slot(key);
        let mut guard = slot.lock();
        if let Some(bytes) = guard.as_ref() {
            return Ok(bytes.clone());
        }
        if let Some(path) = self.file_for(key) {
            match std::fs::read(&path) {
                Ok(bytes) if validate(&bytes).is_ok() => {
                    let bytes: Arc<[u8]> = bytes.into();
                    *guard = Some(bytes.clone());
                    return Ok(bytes);
                }
                Ok(_) => tracing::warn!(path = %path.display(), "ignoring invalid cache entry"),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(CvrError::io(path, e)),
            }
        }
        let bytes = fetch()?;
        validate(&bytes)?;
        if let Some(path) = self.file_for(key) {
            write_atomic(&path, &bytes)?;
        }
        let bytes: Arc<[u8]> = bytes.into();
        *guard = Some(bytes.clone());
        Ok(bytes)
    }

    fn file_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(key))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| CvrError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CvrError::io(path, e))
}
