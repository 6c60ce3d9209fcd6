//! Append-only process ledger: `ledger/log.jsonl`, one canonical record per
//! line, guarded by `ledger/LOCK`.
//!
//! A torn final line (a crash mid-append) is ignored by readers and cut off
//! by the next writer.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::canonical::to_canonical_vec;
use crate::digest::{ArtifactId, ProcessId};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::LockGuard;
use crate::graph::{producers_of, topological_order, ProcessRecord};

/// How a reference is used by the record being appended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefRole {
    Input,
    Output,
    Detail,
}

/// Immutable view of the ledger at one point in time.
#[derive(Debug, Clone, Default)]
pub struct LedgerSnapshot {
    records: Vec<ProcessRecord>,
    index: HashMap<ProcessId, usize>,
    valid_len: u64,
    file_len: u64,
}

impl LedgerSnapshot {
    pub fn records(&self) -> &[ProcessRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &ProcessId) -> Option<&ProcessRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn producers(&self) -> BTreeMap<&ArtifactId, Vec<&ProcessRecord>> {
        producers_of(self.records.iter())
    }

    fn push(&mut self, record: ProcessRecord) {
        self.index.insert(record.process_id.clone(), self.records.len());
        self.records.push(record);
    }
}

#[derive(Debug, Clone)]
pub struct Ledger {
    log_path: PathBuf,
    lock_path: PathBuf,
}

impl Ledger {
    pub fn new(dir: &Path) -> Self {
        Ledger {
            log_path: dir.join("log.jsonl"),
            lock_path: dir.join("LOCK"),
        }
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn lock_path(&self) -> &Path {
        &self.lock_path
    }

    pub fn load(&self) -> Result<LedgerSnapshot> {
        let bytes = match fs::read(&self.log_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(LedgerSnapshot::default()),
            Err(e) => return Err(Error::io(&self.log_path, e)),
        };
        let mut snap = LedgerSnapshot {
            file_len: bytes.len() as u64,
            ..Default::default()
        };
        let mut offset = 0usize;
        while offset < bytes.len() {
            let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
                break; // torn tail
            };
            let line = &bytes[offset..offset + nl];
            let record: ProcessRecord = match serde_json::from_slice(line) {
                Ok(r) => r,
                Err(e) if offset + nl + 1 == bytes.len() => {
                    // garbage only on the final line is treated as torn
                    let _ = e;
                    break;
                }
                Err(e) => {
                    return Err(Error::Storage(format!(
                        "ledger line at byte {offset} is unreadable: {e}"
                    )))
                }
            };
            if !snap.index.contains_key(&record.process_id) {
                snap.push(record);
            }
            offset += nl + 1;
            snap.valid_len = offset as u64;
        }
        Ok(snap)
    }

    /// Runs the checks `append` would, without writing.
    pub(crate) fn precheck(
        &self,
        records: &[ProcessRecord],
        resolves: &dyn Fn(&ArtifactId, RefRole) -> bool,
    ) -> Result<()> {
        let mut snap = self.load()?;
        for record in records {
            if record.computed_id()? != record.process_id {
                return Err(Error::Validation(format!(
                    "process id {} does not match its body",
                    record.process_id
                )));
            }
            if snap.get(&record.process_id).is_none() {
                check_record(&snap, record, resolves)?;
                snap.push(record.clone());
            }
        }
        Ok(())
    }

    /// Validates and durably appends `records`. Records already present are
    /// skipped; all-or-nothing otherwise.
    pub fn append(
        &self,
        records: Vec<ProcessRecord>,
        resolves: &dyn Fn(&ArtifactId, RefRole) -> bool,
    ) -> Result<Vec<ProcessId>> {
        let _lock = LockGuard::acquire(&self.lock_path)?;
        let mut snap = self.load()?;
        if snap.file_len != snap.valid_len {
            let f = OpenOptions::new().write(true).open(&self.log_path).at(&self.log_path)?;
            f.set_len(snap.valid_len).at(&self.log_path)?;
            f.sync_all().at(&self.log_path)?;
        }

        let mut ids = Vec::with_capacity(records.len());
        let mut fresh = Vec::new();
        for record in records {
            let computed = record.computed_id()?;
            if computed != record.process_id {
                return Err(Error::Validation(format!(
                    "process id {} does not match its body (expected {computed})",
                    record.process_id
                )));
            }
            ids.push(record.process_id.clone());
            if snap.get(&record.process_id).is_some() {
                continue;
            }
            check_record(&snap, &record, resolves)?;
            snap.push(record.clone());
            fresh.push(record);
        }
        if fresh.is_empty() {
            return Ok(ids);
        }

        let mut buf = Vec::new();
        for r in &fresh {
            buf.extend(to_canonical_vec(r)?);
            buf.push(b'\n');
        }
        if let Some(dir) = self.log_path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.log_path)
            .at(&self.log_path)?;
        f.write_all(&buf).at(&self.log_path)?;
        f.sync_all().at(&self.log_path)?;
        Ok(ids)
    }
}

pub(crate) fn check_record(
    snap: &LedgerSnapshot,
    record: &ProcessRecord,
    resolves: &dyn Fn(&ArtifactId, RefRole) -> bool,
) -> Result<()> {
    let body = &record.body;
    let known_output = |id: &ArtifactId| snap.records.iter().any(|r| r.body.outputs.contains(id));
    for id in &body.inputs {
        if !resolves(id, RefRole::Input) && !known_output(id) {
            return Err(Error::DanglingReference(format!("input {id} is not stored")));
        }
    }
    for id in &body.outputs {
        if !resolves(id, RefRole::Output) {
            return Err(Error::DanglingReference(format!("output {id} is not stored")));
        }
    }
    for id in body.referenced() {
        if !body.inputs.contains(id) && !body.outputs.contains(id) && !resolves(id, RefRole::Detail) {
            return Err(Error::DanglingReference(format!("execution detail {id} is not stored")));
        }
    }
    body.check_fields()?;

    topological_order(snap.records.iter().chain(std::iter::once(record)))?;

    let key = body.step_key()?;
    let producers = snap.producers();
    for out in body.produced() {
        for existing in producers.get(out).into_iter().flatten() {
            if existing.body.step_key()? != key {
                return Err(Error::DuplicateProducer {
                    artifact: out.to_string(),
                    existing: existing.process_id.to_string(),
                });
            }
        }
    }
    Ok(())
}
