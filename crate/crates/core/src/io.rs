//! File helpers: line reading and write-to-temp-then-rename output.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{NeurankError, Result};

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| NeurankError::io(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    open(path)?
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| NeurankError::io(path, e))
}

/// Writes through `fill` into a temporary file next to `path`, then renames
/// it into place. Readers never observe a partially written file.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::Builder::new()
        .prefix(".neurank-")
        .tempfile_in(dir)
        .map_err(|e| NeurankError::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w).map_err(|e| NeurankError::io(path, e))?;
        w.flush().map_err(|e| NeurankError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| NeurankError::io(path, e.error))?;
    Ok(())
}
