use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::table::DatasetRecord;

/// Reads one record per non-blank line; NULL cells are JSON `null`.
pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.table.validate().map_err(|msg| Error::Record {
            id: rec.id.clone(),
            msg,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Validates every record, then writes the file atomically.
pub fn write_jsonl<'a>(records: impl IntoIterator<Item = &'a DatasetRecord>, path: &Path) -> Result<()> {
    let mut buf = String::new();
    for rec in records {
        rec.table.validate().map_err(|msg| Error::Record {
            id: rec.id.clone(),
            msg,
        })?;
        buf.push_str(&serde_json::to_string(rec)?);
        buf.push('\n');
    }
    atomic_write(path, buf.as_bytes())
}
