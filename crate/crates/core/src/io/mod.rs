//! File formats, dataset manifests, preprocessing and synthetic data.

pub mod container;
pub mod manifest;
pub mod phantom;
pub mod preprocess;
pub mod volume_file;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Renders rows as RFC 4180 CSV (CRLF line endings).
pub fn csv_text<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    let fail = |e: csv::Error| Error::invalid(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r.as_ref()).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv encoding failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

pub fn write_csv<R: AsRef<[String]>>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    write_atomic(path, csv_text(header, rows)?.as_bytes())
}
