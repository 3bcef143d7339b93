//! Append-only selection log.
//!
//! One JSON record per line followed by a tab and the CRC32 of the JSON
//! bytes in lowercase hex. A final line that is incomplete or fails its
//! checksum is dropped on open and truncated away so later appends start on
//! a clean line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Candidate index meaning "no candidate is acceptable".
pub const NONE_ACCEPTABLE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRecord {
    pub image_id: String,
    pub candidate_index: i64,
    pub annotator_id: String,
    pub elapsed_ms: u64,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line} is corrupt")]
    Corrupt { path: PathBuf, line: usize },
}

pub fn encode_line(rec: &SelectionRecord) -> String {
    let json = serde_json::to_string(rec).expect("record serializes");
    let crc = crc32fast::hash(json.as_bytes());
    format!("{json}\t{crc:08x}\n")
}

/// Parses one line without its newline; `None` if the checksum or JSON is bad.
pub fn decode_line(line: &str) -> Option<SelectionRecord> {
    let (json, crc) = line.rsplit_once('\t')?;
    let crc = u32::from_str_radix(crc, 16).ok()?;
    if crc32fast::hash(json.as_bytes()) != crc {
        return None;
    }
    serde_json::from_str(json).ok()
}

#[derive(Debug)]
pub struct SelectionLog {
    path: PathBuf,
    file: File,
    records: Vec<SelectionRecord>,
}

impl SelectionLog {
    /// Opens or creates the log, replaying every complete line.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| LogError::Io {
            path: path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io_err)?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(io_err)?;

        let mut records = Vec::new();
        let mut keep = 0usize;
        let lines: Vec<&str> = text.split_inclusive('\n').collect();
        for (n, raw) in lines.iter().enumerate() {
            let last = n + 1 == lines.len();
            let parsed = raw.strip_suffix('\n').and_then(decode_line);
            match parsed {
                Some(rec) => {
                    records.push(rec);
                    keep += raw.len();
                }
                None if last => break,
                None => {
                    return Err(LogError::Corrupt {
                        path: path.clone(),
                        line: n + 1,
                    })
                }
            }
        }
        if keep < text.len() {
            file.set_len(keep as u64).map_err(io_err)?;
            file.seek(SeekFrom::End(0)).map_err(io_err)?;
        }
        Ok(SelectionLog { path, file, records })
    }

    /// Writes and syncs one record, then makes it visible.
    pub fn append(&mut self, rec: SelectionRecord) -> Result<(), LogError> {
        self.file
            .write_all(encode_line(&rec).as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|source| LogError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.records.push(rec);
        Ok(())
    }

    /// Full history in append order.
    pub fn records(&self) -> &[SelectionRecord] {
        &self.records
    }
}

/// Latest record per (image, annotator).
pub fn latest_per_annotator(records: &[SelectionRecord]) -> BTreeMap<(String, String), &SelectionRecord> {
    let mut out = BTreeMap::new();
    for r in records {
        out.insert((r.image_id.clone(), r.annotator_id.clone()), r);
    }
    out
}

/// Latest record per image, whoever submitted it.
pub fn latest_per_image(records: &[SelectionRecord]) -> BTreeMap<String, &SelectionRecord> {
    let mut out = BTreeMap::new();
    for r in records {
        out.insert(r.image_id.clone(), r);
    }
    out
}
