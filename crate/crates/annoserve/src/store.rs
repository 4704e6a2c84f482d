//! Append-only JSON-lines label log.
//!
//! Every write is flushed and fsynced before it is acknowledged. On open the
//! log is replayed; the last record for an instance wins. A trailing line
//! without a newline is the remnant of an interrupted write and is cut off.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::{AnnoError, InstanceKey};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub image: String,
    pub id: u32,
    pub class: u32,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl LabelRecord {
    pub fn key(&self) -> InstanceKey {
        InstanceKey {
            image: self.image.clone(),
            id: self.id,
        }
    }
}

pub struct LabelStore {
    path: PathBuf,
    file: File,
    active: BTreeMap<InstanceKey, LabelRecord>,
    history: usize,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl LabelStore {
    /// Opens (creating if needed) and replays the log.
    pub fn open(path: &Path) -> Result<Self, AnnoError> {
        let io = |e| AnnoError::Io(path.to_owned(), e);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        let mut active = BTreeMap::new();
        let mut history = 0;
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(io)?;
                if n == 0 || !line.ends_with('\n') {
                    break;
                }
                good_len += n as u64;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| {
                    AnnoError::Corrupt(format!("{}: line {}: {e}", path.display(), history + 1))
                })?;
                history += 1;
                active.insert(rec.key(), rec);
            }
        }
        if file.metadata().map_err(io)?.len() > good_len {
            file.set_len(good_len).map_err(io)?;
            file.sync_all().map_err(io)?;
        }
        file.seek(SeekFrom::End(0)).map_err(io)?;
        Ok(Self {
            path: path.to_owned(),
            file,
            active,
            history,
        })
    }

    /// Appends a record and fsyncs before returning.
    pub fn append(
        &mut self,
        key: &InstanceKey,
        class: u32,
        note: Option<String>,
    ) -> Result<LabelRecord, AnnoError> {
        let rec = LabelRecord {
            image: key.image.clone(),
            id: key.id,
            class,
            timestamp_ms: now_ms(),
            note,
        };
        let mut line =
            serde_json::to_string(&rec).map_err(|e| AnnoError::Corrupt(e.to_string()))?;
        line.push('\n');
        let io = |e| AnnoError::Io(self.path.clone(), e);
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.flush().map_err(io)?;
        self.file.sync_data().map_err(io)?;
        self.history += 1;
        self.active.insert(key.clone(), rec.clone());
        Ok(rec)
    }

    /// Current label per instance.
    pub fn active(&self) -> &BTreeMap<InstanceKey, LabelRecord> {
        &self.active
    }

    /// Number of records in the log, relabels included.
    pub fn history_len(&self) -> usize {
        self.history
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
