//! JSON-lines manifests.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{AppealError, Result};
use crate::field::ensure_parent;

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| AppealError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AppealError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| AppealError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Replaces the file with the given rows, via a temp file and rename.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Appends one row as a single write.
pub fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut line = serde_json::to_vec(row)?;
    line.push(b'\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| AppealError::io(path, e))?;
    file.write_all(&line).map_err(|e| AppealError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| AppealError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AppealError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| AppealError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| AppealError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        append_jsonl(&path, &(1, "a")).unwrap();
        append_jsonl(&path, &(2, "b")).unwrap();
        let rows: Vec<(i32, String)> = read_jsonl(&path).unwrap();
        assert_eq!(rows, vec![(1, "a".into()), (2, "b".into())]);
        write_jsonl(&path, &rows[..1]).unwrap();
        assert_eq!(read_jsonl::<(i32, String)>(&path).unwrap().len(), 1);
    }

    #[test]
    fn bad_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "1\nnope\n").unwrap();
        let err = read_jsonl::<i32>(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
