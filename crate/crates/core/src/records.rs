//! Line-delimited JSON record files with atomic (write-then-rename) output.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("serializing record: {0}")]
    Encode(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a truncated file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), std::io::Error> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String, RecordError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), RecordError> {
    write_atomic(path, to_jsonl(records)?.as_bytes())?;
    Ok(())
}

/// Parses JSON lines; blank lines are skipped. Errors name the 1-based line.
pub fn parse_jsonl<T: DeserializeOwned>(source: &str, text: impl BufRead) -> Result<Vec<T>, RecordError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| RecordError::Malformed {
            path: source.to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    let file = File::open(path)?;
    parse_jsonl(&path.display().to_string(), BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_line_is_reported() {
        let text = "{\"a\":1}\n\n{\"a\":\n";
        let err = parse_jsonl::<serde_json::Value>("mem", text.as_bytes()).unwrap_err();
        assert!(matches!(err, RecordError::Malformed { line: 3, .. }), "{err}");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        write_jsonl(&path, &[1, 2]).unwrap();
        write_jsonl(&path, &[3]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "3\n");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
