//! Headers and JSON-lines helpers shared by every file the tools write.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL: &str = "latflow";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex sha256 of the compact JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// First line of every JSONL artifact and a field of every JSON artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl Header {
    pub fn new<T: Serialize>(kind: &str, config: &T, seed: u64) -> Result<Self> {
        Ok(Self {
            tool: TOOL.to_string(),
            version: VERSION.to_string(),
            kind: kind.to_string(),
            config_hash: config_hash(config)?,
            seed,
            config: serde_json::to_value(config)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: Header,
}

pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path, header: &Header) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = Self {
            out: BufWriter::new(File::create(path)?),
        };
        w.write(&HeaderLine {
            header: header.clone(),
        })?;
        Ok(w)
    }

    /// Opens an existing log for appending rows after its header.
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, row)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for JsonlWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &Header, rows: &[T]) -> Result<()> {
    let mut w = JsonlWriter::create(path, header)?;
    for r in rows {
        w.write(r)?;
    }
    w.flush()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Header, Vec<T>)> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))??;
    let header: HeaderLine = serde_json::from_str(&first)
        .map_err(|e| Error::Data(format!("{}: bad header line: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 2)))?,
        );
    }
    Ok((header.header, rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        a: f64,
        b: Vec<usize>,
    }

    #[test]
    fn jsonl_round_trip_keeps_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let header = Header::new("test", &("cfg", 3), 7).unwrap();
        let rows = vec![Row { a: 0.1 + 0.2, b: vec![1, 2] }, Row { a: -1e-300, b: vec![] }];
        write_jsonl(&path, &header, &rows).unwrap();
        let (h, back): (Header, Vec<Row>) = read_jsonl(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, rows);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = config_hash(&(1, 2)).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash(&(1, 2)).unwrap());
        assert_ne!(a, config_hash(&(1, 3)).unwrap());
    }
}
