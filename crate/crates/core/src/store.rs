//! Immutable content-addressed object storage with descriptive metadata.
//!
//! Objects live at `objects/<2 hex>/<62 hex>` and are written through a
//! temporary file and a rename, so a reader never sees a partial object.
//! Metadata documents live at `meta/<digest>.json` in canonical form. The
//! byte size is bound to the digest and never changes; labels and subject
//! records only ever grow.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_vec;
use crate::digest::{sha256_reader, ArtifactId};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{write_atomic, LockGuard};
use crate::time::Timestamp;

pub const DEFAULT_MAX_OBJECT_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub created_at: Timestamp,
    pub storage_ref: String,
    pub file_type: String,
    pub data_format: String,
    pub modality: String,
    pub byte_size: u64,
    pub labels: BTreeMap<String, String>,
}

/// Caller-supplied description for [`ArtifactStore::put_artifact`]. The
/// store fills in creation time and storage location.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArtifactDescription {
    pub file_type: String,
    pub data_format: String,
    pub modality: String,
    /// When set, must equal the length of the stored bytes.
    pub byte_size: Option<u64>,
    pub labels: BTreeMap<String, String>,
}

impl ArtifactDescription {
    /// File type and data format inferred from a file name's extension.
    pub fn for_file_name(name: &str) -> Self {
        let ext = crate::fsutil::extension_tag(name);
        ArtifactDescription {
            data_format: ext.to_ascii_uppercase(),
            file_type: ext,
            ..Default::default()
        }
    }

    pub fn with_label(mut self, key: &str, value: &str) -> Self {
        self.labels.insert(key.to_owned(), value.to_owned());
        self
    }
}

/// Demographics and sample-collection details for one subject.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectMetadata {
    pub subject_id: String,
    pub cohort: String,
    pub demographics: BTreeMap<String, String>,
    pub collection: BTreeMap<String, String>,
}

impl SubjectMetadata {
    /// Lowercases map keys and rejects empty identifiers or keys.
    pub fn normalized(self) -> Result<Self> {
        if self.subject_id.trim().is_empty() {
            return Err(Error::Validation("subject_id must not be empty".into()));
        }
        let norm = |m: BTreeMap<String, String>, what: &str| -> Result<BTreeMap<String, String>> {
            let mut out = BTreeMap::new();
            for (k, v) in m {
                let key = k.trim().to_lowercase();
                if key.is_empty() {
                    return Err(Error::Validation(format!("empty {what} key")));
                }
                out.insert(key, v);
            }
            Ok(out)
        };
        Ok(SubjectMetadata {
            demographics: norm(self.demographics, "demographics")?,
            collection: norm(self.collection, "collection")?,
            ..self
        })
    }
}

/// A subject record stamped with the time it was attached to the artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub recorded_at: Timestamp,
    pub subject: SubjectMetadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub id: ArtifactId,
    pub meta: ArtifactMeta,
    pub subjects: Vec<SubjectRecord>,
}

impl Artifact {
    pub fn cohorts(&self) -> impl Iterator<Item = &str> {
        self.subjects.iter().map(|s| s.subject.cohort.as_str())
    }

    /// Folds `other` into `self`. Returns whether anything changed.
    fn absorb(&mut self, other: &Artifact) -> Result<bool> {
        if self.meta.byte_size != other.meta.byte_size {
            return Err(Error::MetaConflict {
                id: self.id.to_string(),
                message: format!(
                    "byte_size {} recorded, {} supplied",
                    self.meta.byte_size, other.meta.byte_size
                ),
            });
        }
        let mut changed = false;
        for (field, incoming) in [
            (&mut self.meta.file_type, &other.meta.file_type),
            (&mut self.meta.data_format, &other.meta.data_format),
            (&mut self.meta.modality, &other.meta.modality),
        ] {
            if field.is_empty() && !incoming.is_empty() {
                *field = incoming.clone();
                changed = true;
            }
        }
        for (k, v) in &other.meta.labels {
            if !self.meta.labels.contains_key(k) {
                self.meta.labels.insert(k.clone(), v.clone());
                changed = true;
            }
        }
        for rec in &other.subjects {
            if !self.subjects.iter().any(|s| s.subject == rec.subject) {
                self.subjects.push(rec.clone());
                changed = true;
            }
        }
        Ok(changed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyResult {
    Ok,
    Corrupt,
    Missing,
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
    lock_path: PathBuf,
    max_object_bytes: u64,
    verify_on_read: bool,
}

impl ArtifactStore {
    pub(crate) fn new(root: &Path, lock_path: PathBuf, max_object_bytes: u64, verify_on_read: bool) -> Self {
        ArtifactStore {
            root: root.to_path_buf(),
            lock_path,
            max_object_bytes,
            verify_on_read,
        }
    }

    pub fn storage_ref(id: &ArtifactId) -> String {
        let hex = id.as_str();
        format!("objects/{}/{}", &hex[..2], &hex[2..])
    }

    pub fn object_path(&self, id: &ArtifactId) -> PathBuf {
        self.root.join(Self::storage_ref(id))
    }

    pub fn meta_path(&self, id: &ArtifactId) -> PathBuf {
        self.root.join("meta").join(format!("{id}.json"))
    }

    pub fn contains_object(&self, id: &ArtifactId) -> bool {
        self.object_path(id).is_file()
    }

    pub fn has_record(&self, id: &ArtifactId) -> bool {
        self.meta_path(id).is_file()
    }

    /// Known either through a metadata record or a stored object.
    pub fn resolves(&self, id: &ArtifactId) -> bool {
        self.has_record(id) || self.contains_object(id)
    }

    pub fn put_artifact(
        &self,
        bytes: &[u8],
        description: ArtifactDescription,
        subjects: Vec<SubjectMetadata>,
    ) -> Result<ArtifactId> {
        let len = bytes.len() as u64;
        if len > self.max_object_bytes {
            return Err(Error::Storage(format!(
                "object of {len} bytes exceeds the {} byte limit",
                self.max_object_bytes
            )));
        }
        let id = ArtifactId::of_bytes(bytes);
        if let Some(declared) = description.byte_size {
            if declared != len {
                return Err(Error::MetaConflict {
                    id: id.to_string(),
                    message: format!("declared byte_size {declared} but {len} bytes supplied"),
                });
            }
        }
        let now = Timestamp::now();
        let subjects = subjects
            .into_iter()
            .map(|s| {
                Ok(SubjectRecord {
                    recorded_at: now,
                    subject: s.normalized()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let artifact = Artifact {
            meta: ArtifactMeta {
                created_at: now,
                storage_ref: Self::storage_ref(&id),
                file_type: description.file_type,
                data_format: description.data_format,
                modality: description.modality,
                byte_size: len,
                labels: description.labels,
            },
            id: id.clone(),
            subjects,
        };
        self.write_object(&id, bytes)?;
        self.record_artifact(&artifact)?;
        Ok(id)
    }

    /// Stores bytes under their digest unless an intact copy already exists.
    pub(crate) fn write_object(&self, id: &ArtifactId, bytes: &[u8]) -> Result<()> {
        if self.verify_artifact(id) == VerifyResult::Ok {
            return Ok(());
        }
        let path = self.object_path(id);
        write_atomic(&path, bytes)?;
        let mut perms = fs::metadata(&path).at(&path)?.permissions();
        perms.set_readonly(true);
        fs::set_permissions(&path, perms).at(&path)
    }

    /// Creates or merges the metadata record for `artifact.id`.
    pub(crate) fn record_artifact(&self, artifact: &Artifact) -> Result<()> {
        let _lock = LockGuard::acquire(&self.lock_path)?;
        let path = self.meta_path(&artifact.id);
        let merged = match self.read_record(&artifact.id)? {
            Some(mut existing) => {
                if !existing.absorb(artifact)? {
                    return Ok(());
                }
                existing
            }
            None => artifact.clone(),
        };
        write_atomic(&path, &to_canonical_vec(&merged)?)
    }

    /// Fails if recording `artifact` would conflict with stored metadata.
    pub(crate) fn check_merge(&self, artifact: &Artifact) -> Result<()> {
        if let Some(mut existing) = self.read_record(&artifact.id)? {
            existing.absorb(artifact)?;
        }
        Ok(())
    }

    fn read_record(&self, id: &ArtifactId) -> Result<Option<Artifact>> {
        let path = self.meta_path(id);
        match fs::read(&path) {
            Ok(bytes) => {
                let artifact: Artifact = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Storage(format!("corrupt metadata {}: {e}", path.display())))?;
                Ok(Some(artifact))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn get_artifact(&self, id: &ArtifactId) -> Result<Vec<u8>> {
        let path = self.object_path(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("artifact {id}")))
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        if self.verify_on_read && ArtifactId::of_bytes(&bytes) != *id {
            return Err(Error::Integrity(format!("object {id} no longer matches its digest")));
        }
        Ok(bytes)
    }

    pub fn verify_artifact(&self, id: &ArtifactId) -> VerifyResult {
        let path = self.object_path(id);
        match File::open(&path) {
            Ok(f) => match sha256_reader(f) {
                Ok(hex) if hex == id.as_str() => VerifyResult::Ok,
                _ => VerifyResult::Corrupt,
            },
            Err(_) => VerifyResult::Missing,
        }
    }

    pub fn stat_artifact(&self, id: &ArtifactId) -> Result<Artifact> {
        self.read_record(id)?
            .ok_or_else(|| Error::NotFound(format!("artifact {id}")))
    }

    /// Copies an object out to `dest`, checking its digest on the way.
    pub fn export_object(&self, id: &ArtifactId, dest: &Path) -> Result<()> {
        let bytes = self.get_artifact(id)?;
        if ArtifactId::of_bytes(&bytes) != *id {
            return Err(Error::Integrity(format!("object {id} no longer matches its digest")));
        }
        fs::write(dest, bytes).at(dest)
    }

    /// All digests with an object file present, sorted.
    pub fn list_objects(&self) -> Result<Vec<ArtifactId>> {
        let objects = self.root.join("objects");
        let mut ids = Vec::new();
        let shards = match fs::read_dir(&objects) {
            Ok(rd) => rd,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ids),
            Err(e) => return Err(Error::io(objects, e)),
        };
        for shard in shards {
            let shard = shard.at(&objects)?;
            let prefix = shard.file_name().to_string_lossy().into_owned();
            if prefix.len() != 2 || !shard.path().is_dir() {
                continue;
            }
            for entry in fs::read_dir(shard.path()).at(shard.path())? {
                let entry = entry.at(shard.path())?;
                let name = format!("{prefix}{}", entry.file_name().to_string_lossy());
                if let Ok(id) = name.parse::<ArtifactId>() {
                    ids.push(id);
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn object_count(&self) -> Result<usize> {
        Ok(self.list_objects()?.len())
    }
}
