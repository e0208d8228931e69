//! Atomic file output.

use std::io::Write;
use std::path::Path;

use crate::error::{KwsError, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| KwsError::file(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| KwsError::file(dir, e))?;
    tmp.write_all(bytes).map_err(|e| KwsError::file(path, e))?;
    tmp.as_file().sync_all().map_err(|e| KwsError::file(path, e))?;
    tmp.persist(path).map_err(|e| KwsError::file(path, e.error))?;
    Ok(())
}
