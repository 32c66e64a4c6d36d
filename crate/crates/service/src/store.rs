//! On-disk layout, one directory per study:
//!
//! ```text
//! <root>/<study id>/events.log          one JSON record per line, fsynced
//! <root>/<study id>/snapshot-<itr>.json study state after iteration <itr>
//! ```
//!
//! Events are appended before they take effect in memory. Snapshots are an
//! optimization only: loading starts from the newest readable snapshot and
//! replays the log records that follow it.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::study::{Event, Study};

pub const EVENTS_FILE: &str = "events.log";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
}

pub fn snapshot_name(iteration: usize) -> String {
    format!("snapshot-{iteration}.json")
}

/// A study together with its open event log.
#[derive(Debug)]
pub struct PersistentStudy {
    study: Study,
    dir: PathBuf,
    log: File,
}

impl PersistentStudy {
    /// Creates `<root>/<id>`, logs the creation event and writes the first
    /// snapshot.
    pub fn create(root: &Path, event: Event) -> Result<Self> {
        let mut study = Study::create(&event)?;
        let dir = root.join(&study.id);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(ServiceError::Conflict(format!("study {} already exists", study.id)));
            }
            Err(e) => return Err(e.into()),
        }
        let mut log = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(dir.join(EVENTS_FILE))?;
        append(&mut log, &Record { seq: 1, event })?;
        sync_dir(&dir)?;
        study.seq = 1;
        let me = Self { study, dir, log };
        me.write_snapshot()?;
        Ok(me)
    }

    /// Rebuilds a study from its directory.
    pub fn open(dir: &Path) -> Result<Self> {
        let log_path = dir.join(EVENTS_FILE);
        let records = read_log(&log_path)?;
        let mut study = match latest_snapshot(dir) {
            Some(s) => s,
            None => {
                let first = records.first().ok_or_else(|| corrupt(&log_path, 1, "empty log"))?;
                let mut s = Study::create(&first.event)?;
                s.seq = first.seq;
                s
            }
        };
        let last_seq = records.last().map_or(0, |r| r.seq);
        if study.seq > last_seq {
            return Err(corrupt(&log_path, records.len(), "snapshot is ahead of the log"));
        }
        for (line, rec) in records.iter().enumerate() {
            if rec.seq <= study.seq {
                continue;
            }
            if rec.seq != study.seq + 1 {
                return Err(corrupt(&log_path, line + 1, "sequence gap"));
            }
            study.apply(rec.seq, &rec.event)?;
        }
        let log = OpenOptions::new().append(true).open(&log_path)?;
        Ok(Self {
            study,
            dir: dir.to_path_buf(),
            log,
        })
    }

    pub fn study(&self) -> &Study {
        &self.study
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Logs `event` and applies it. Advances are applied to a copy first so
    /// a failed refit leaves neither the log nor the study changed.
    pub fn commit(&mut self, event: Event) -> Result<()> {
        let seq = self.study.seq + 1;
        match event {
            Event::Advanced { .. } => {
                let mut next = self.study.clone();
                next.apply(seq, &event)?;
                append(&mut self.log, &Record { seq, event })?;
                self.study = next;
                self.write_snapshot()
            }
            _ => {
                append(&mut self.log, &Record { seq, event: event.clone() })?;
                self.study.apply(seq, &event)
            }
        }
    }

    fn write_snapshot(&self) -> Result<()> {
        let name = snapshot_name(self.study.state.iteration);
        let tmp = self.dir.join(format!("{name}.tmp"));
        let mut f = File::create(&tmp)?;
        serde_json::to_writer(&mut f, &self.study).map_err(|e| ServiceError::Storage(e.to_string()))?;
        f.sync_all()?;
        fs::rename(&tmp, self.dir.join(name))?;
        sync_dir(&self.dir)
    }
}

fn append(log: &mut File, record: &Record) -> Result<()> {
    let mut line = serde_json::to_vec(record).map_err(|e| ServiceError::Storage(e.to_string()))?;
    line.push(b'\n');
    log.write_all(&line)?;
    log.sync_data()?;
    Ok(())
}

fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir)?.sync_all()?;
    Ok(())
}

fn corrupt(path: &Path, line: usize, message: &str) -> ServiceError {
    ServiceError::CorruptLog {
        path: path.display().to_string(),
        line,
        message: message.to_string(),
    }
}

/// Parses every complete line. An unterminated last line is a write cut
/// short by a crash; it was never acknowledged, so it is truncated away.
fn read_log(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path)?;
    let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
    if complete < bytes.len() {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(complete as u64)?;
        f.sync_all()?;
    }
    let text = std::str::from_utf8(&bytes[..complete]).map_err(|e| corrupt(path, 0, &e.to_string()))?;
    text.lines()
        .enumerate()
        .map(|(k, line)| serde_json::from_str(line).map_err(|e| corrupt(path, k + 1, &e.to_string())))
        .collect()
}

/// Newest snapshot that parses; unreadable ones fall back to older ones or
/// to a full replay.
fn latest_snapshot(dir: &Path) -> Option<Study> {
    let mut found: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let itr = name.strip_prefix("snapshot-")?.strip_suffix(".json")?.parse().ok()?;
            Some((itr, e.path()))
        })
        .collect();
    found.sort_by(|a, b| b.0.cmp(&a.0));
    found
        .into_iter()
        .find_map(|(_, path)| serde_json::from_slice(&fs::read(path).ok()?).ok())
}
