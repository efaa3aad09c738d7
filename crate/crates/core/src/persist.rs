//! Snapshot and restore of [`SchedulerState`].
//!
//! The document is pretty-printed JSON with a format tag and version first.
//! Maps are ordered, so equal states give byte-identical documents. The
//! field-by-field grammar is in `docs/snapshot-format.md`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Cluster, JobId, JobPool, Millis, ResourcePool};
use crate::scheduler::{Allocation, SchedulerState};

pub const FORMAT: &str = "cloudsched-state";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("cannot write snapshot {path}: {reason}")]
    WriteFailure { path: String, reason: String },
    #[error("cannot read snapshot {path}: {reason}")]
    ReadFailure { path: String, reason: String },
    #[error("corrupt snapshot at line {line}, column {column}: {reason}")]
    CorruptSnapshot { line: usize, column: usize, reason: String },
    #[error("unsupported snapshot version {found} (this build reads {VERSION})")]
    UnsupportedVersion { found: u32 },
}

#[derive(Serialize)]
struct DocumentRef<'a> {
    format: &'static str,
    version: u32,
    clock: Millis,
    cycle: u64,
    next_vm_seq: u64,
    queue_cursor: u64,
    clusters: &'a [Cluster],
    jobs: &'a JobPool,
    allocation: Allocation,
    draining: &'a BTreeMap<String, Millis>,
    holds: &'a BTreeMap<JobId, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    clock: Millis,
    cycle: u64,
    next_vm_seq: u64,
    queue_cursor: u64,
    clusters: Vec<Cluster>,
    jobs: JobPool,
    allocation: Allocation,
    draining: BTreeMap<String, Millis>,
    holds: BTreeMap<JobId, String>,
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    version: Option<u32>,
}

pub fn snapshot(state: &SchedulerState) -> String {
    let doc = DocumentRef {
        format: FORMAT,
        version: VERSION,
        clock: state.now,
        cycle: state.cycle,
        next_vm_seq: state.next_vm_seq,
        queue_cursor: state.queue_cursor,
        clusters: &state.resources.clusters,
        jobs: &state.jobs,
        allocation: state.allocation(),
        draining: &state.draining,
        holds: &state.holds,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("state serializes");
    text.push('\n');
    text
}

fn corrupt(e: serde_json::Error) -> PersistError {
    PersistError::CorruptSnapshot { line: e.line(), column: e.column(), reason: e.to_string() }
}

pub fn restore(text: &str) -> Result<SchedulerState, PersistError> {
    let header: Header = serde_json::from_str(text).map_err(corrupt)?;
    if header.format.as_deref() != Some(FORMAT) {
        return Err(PersistError::CorruptSnapshot {
            line: 1,
            column: 1,
            reason: format!("format tag is {:?}, expected {FORMAT:?}", header.format.unwrap_or_default()),
        });
    }
    match header.version {
        Some(VERSION) => {}
        Some(found) => return Err(PersistError::UnsupportedVersion { found }),
        None => return Err(PersistError::CorruptSnapshot { line: 1, column: 1, reason: "missing version".into() }),
    }
    let doc: Document = serde_json::from_str(text).map_err(corrupt)?;
    debug_assert_eq!(doc.format, FORMAT);
    debug_assert_eq!(doc.version, VERSION);
    let resources = ResourcePool::new(doc.clusters).map_err(|reason| PersistError::CorruptSnapshot {
        line: 0,
        column: 0,
        reason,
    })?;
    let state = SchedulerState {
        now: doc.clock,
        cycle: doc.cycle,
        resources,
        jobs: doc.jobs,
        draining: doc.draining,
        holds: doc.holds,
        next_vm_seq: doc.next_vm_seq,
        queue_cursor: doc.queue_cursor,
    };
    let invalid = |reason: String| PersistError::CorruptSnapshot { line: 0, column: 0, reason };
    if state.allocation() != doc.allocation {
        return Err(invalid("allocation does not match clusters and jobs".into()));
    }
    state.check().map_err(invalid)?;
    Ok(state)
}

/// Writes `text` to `path` atomically: a sibling temp file is written,
/// flushed and renamed over the target.
pub fn write_atomic(path: &Path, text: &str) -> Result<(), PersistError> {
    let fail = |reason: String| PersistError::WriteFailure { path: path.display().to_string(), reason };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| fail(e.to_string()))?;
    tmp.write_all(text.as_bytes()).map_err(|e| fail(e.to_string()))?;
    tmp.as_file().sync_all().map_err(|e| fail(e.to_string()))?;
    tmp.persist(path).map_err(|e| fail(e.error.to_string()))?;
    Ok(())
}

pub fn save(state: &SchedulerState, path: &Path) -> Result<(), PersistError> {
    write_atomic(path, &snapshot(state))
}

pub fn load(path: &Path) -> Result<SchedulerState, PersistError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PersistError::ReadFailure { path: path.display().to_string(), reason: e.to_string() })?;
    restore(&text)
}
