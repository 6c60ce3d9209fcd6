//! Deterministic archive of the code a step ran: the command line plus the
//! bytes of every script it named. Paths are sorted and no timestamps are
//! kept, so identical code always digests identically.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_vec;
use crate::error::{Error, IoContext, Result};
use crate::fsutil::safe_relative;

pub const FORMAT: &str = "certpro-code/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundledFile {
    pub path: String,
    pub executable: bool,
    pub content: String,
}

impl BundledFile {
    pub fn bytes(&self) -> Result<Vec<u8>> {
        STANDARD
            .decode(&self.content)
            .map_err(|e| Error::Integrity(format!("code file {} is not valid base64: {e}", self.path)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeBundle {
    pub format: String,
    pub command: Vec<String>,
    pub files: Vec<BundledFile>,
}

impl CodeBundle {
    /// Collects command arguments that name regular files under `base`,
    /// skipping anything in `exclude` (staged data files).
    pub fn capture(command: &[String], base: &Path, exclude: &[&str]) -> Result<Self> {
        let mut files: Vec<BundledFile> = Vec::new();
        for arg in command {
            if exclude.contains(&arg.as_str()) || files.iter().any(|f| &f.path == arg) {
                continue;
            }
            let Some(rel) = safe_relative(arg) else { continue };
            let path = base.join(&rel);
            let Ok(md) = fs::metadata(&path) else { continue };
            if !md.is_file() {
                continue;
            }
            let bytes = fs::read(&path).at(&path)?;
            files.push(BundledFile {
                path: rel.to_string_lossy().into_owned(),
                executable: md.permissions().mode() & 0o111 != 0,
                content: STANDARD.encode(bytes),
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(CodeBundle {
            format: FORMAT.to_owned(),
            command: command.to_vec(),
            files,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        to_canonical_vec(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bundle: CodeBundle =
            serde_json::from_slice(bytes).map_err(|e| Error::Integrity(format!("unreadable code bundle: {e}")))?;
        if bundle.format != FORMAT {
            return Err(Error::Integrity(format!(
                "unknown code bundle format {:?}",
                bundle.format
            )));
        }
        if bundle.command.is_empty() {
            return Err(Error::Integrity("code bundle has an empty command".into()));
        }
        Ok(bundle)
    }

    /// Writes the bundled files into `dir`.
    pub fn materialize(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let rel = safe_relative(&f.path)
                .ok_or_else(|| Error::Integrity(format!("unsafe path {:?} in code bundle", f.path)))?;
            let dest = dir.join(rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent).at(parent)?;
            }
            fs::write(&dest, f.bytes()?).at(&dest)?;
            let mode = if f.executable { 0o755 } else { 0o644 };
            fs::set_permissions(&dest, fs::Permissions::from_mode(mode)).at(&dest)?;
        }
        Ok(())
    }
}
