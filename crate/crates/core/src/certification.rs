//! Completeness grading, identifier minting and certificates of
//! reproducibility.
//!
//! Grading rules, applied to the ancestry of the requested roots:
//!
//! * error: any structural violation (closure, cycle, bipartite, single
//!   producer) or any object that is missing or fails its digest check;
//! * warning: a non-ingestion process with an empty execution-detail
//!   category, or a data-flow leaf that no ingestion record produced.
//!
//! Any error grades the trace FRAGMENT, otherwise any warning PARTIAL,
//! otherwise FULL.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::rngs::OsRng;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::canonical::to_canonical_vec;
use crate::digest::ArtifactId;
use crate::error::{Error, IoContext, Result};
use crate::fsutil::LockGuard;
use crate::graph::{validate_graph, TraceGraph};
use crate::interchange::TraceDocument;
use crate::repo::Repository;
use crate::store::VerifyResult;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BadgeLevel {
    Fragment,
    Partial,
    Full,
}

impl BadgeLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            BadgeLevel::Fragment => "FRAGMENT",
            BadgeLevel::Partial => "PARTIAL",
            BadgeLevel::Full => "FULL",
        }
    }
}

impl fmt::Display for BadgeLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Finding {
    pub severity: Severity,
    pub node: String,
    pub rule: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletenessReport {
    pub roots: Vec<ArtifactId>,
    pub badge: BadgeLevel,
    pub findings: Vec<Finding>,
    pub assessed_at: Timestamp,
    pub trace_digest: String,
}

/// Grades a trace given the integrity of each referenced object. Findings
/// come back sorted, one per (node, rule).
pub fn grade(graph: &TraceGraph, objects: &BTreeMap<ArtifactId, VerifyResult>) -> (BadgeLevel, Vec<Finding>) {
    let mut findings: BTreeSet<Finding> = BTreeSet::new();
    let mut reported: HashSet<String> = HashSet::new();

    for v in validate_graph(graph).violations {
        reported.insert(v.node.clone());
        findings.insert(Finding {
            severity: Severity::Error,
            node: v.node,
            rule: serde_json::to_value(v.kind)
                .ok()
                .and_then(|s| s.as_str().map(str::to_owned))
                .unwrap_or_default(),
            message: v.message,
        });
    }
    for (id, status) in objects {
        if reported.contains(id.as_str()) {
            continue;
        }
        let (rule, message) = match status {
            VerifyResult::Ok => continue,
            VerifyResult::Corrupt => ("integrity", format!("object {id} fails its digest check")),
            VerifyResult::Missing => ("missing-object", format!("object {id} is missing")),
        };
        findings.insert(Finding {
            severity: Severity::Error,
            node: id.to_string(),
            rule: rule.into(),
            message,
        });
    }

    for (pid, p) in &graph.processes {
        if p.body.is_ingestion() {
            continue;
        }
        match &p.body.details {
            None => {
                findings.insert(Finding {
                    severity: Severity::Warning,
                    node: pid.to_string(),
                    rule: "execution-details".into(),
                    message: "no execution details recorded".into(),
                });
            }
            Some(d) => {
                for category in d.missing_categories() {
                    findings.insert(Finding {
                        severity: Severity::Warning,
                        node: pid.to_string(),
                        rule: format!("missing-{category}"),
                        message: format!(
                            "{} step records no {}",
                            p.body.transformation_type,
                            category.replace('_', " ")
                        ),
                    });
                }
            }
        }
    }

    let producers = graph.producers();
    for leaf in graph.leaves() {
        let ingested = producers
            .get(&leaf)
            .is_some_and(|ps| ps.iter().any(|p| p.body.is_ingestion()));
        if !ingested {
            findings.insert(Finding {
                severity: Severity::Warning,
                node: leaf.to_string(),
                rule: "not-ingested".into(),
                message: format!("source artifact {leaf} was not brought in by an ingestion step"),
            });
        }
    }

    let findings: Vec<Finding> = findings.into_iter().collect();
    let badge = if findings.iter().any(|f| f.severity == Severity::Error) {
        BadgeLevel::Fragment
    } else if findings.is_empty() {
        BadgeLevel::Full
    } else {
        BadgeLevel::Partial
    };
    (badge, findings)
}

/// Integrity of every artifact a graph references.
pub fn object_status(repo: &Repository, graph: &TraceGraph) -> BTreeMap<ArtifactId, VerifyResult> {
    graph
        .referenced_ids()
        .into_iter()
        .map(|id| {
            let status = repo.store().verify_artifact(&id);
            (id, status)
        })
        .collect()
}

impl Repository {
    pub fn assess_completeness(&self, roots: &[ArtifactId]) -> Result<CompletenessReport> {
        let graph = self.trace_ancestry(roots)?;
        let objects = object_status(self, &graph);
        let (badge, findings) = grade(&graph, &objects);
        Ok(CompletenessReport {
            roots: graph.roots.clone(),
            badge,
            findings,
            assessed_at: Timestamp::now(),
            trace_digest: TraceDocument::from_graph(&graph).digest()?,
        })
    }
}

/// A DOI-shaped identifier: `10.<4-9 digits>/<4 alnum>-<4 alnum>`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Doi {
    prefix: String,
    suffix: String,
}

const SUFFIX_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

fn check_prefix(prefix: &str) -> Result<()> {
    let digits = prefix
        .strip_prefix("10.")
        .ok_or_else(|| Error::Format(format!("DOI prefix {prefix:?} must start with `10.`")))?;
    if !(4..=9).contains(&digits.len()) || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Format(format!(
            "DOI prefix {prefix:?} must be `10.` followed by 4 to 9 digits"
        )));
    }
    Ok(())
}

fn check_suffix(suffix: &str) -> Result<()> {
    let ok = suffix.len() == 9
        && suffix.bytes().enumerate().all(|(i, b)| {
            if i == 4 {
                b == b'-'
            } else {
                b.is_ascii_lowercase() || b.is_ascii_digit()
            }
        });
    if ok {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "DOI suffix {suffix:?} must look like `abcd-1234`"
        )))
    }
}

impl Doi {
    pub fn new(prefix: &str, suffix: &str) -> Result<Self> {
        check_prefix(prefix)?;
        check_suffix(suffix)?;
        Ok(Doi {
            prefix: prefix.to_owned(),
            suffix: suffix.to_owned(),
        })
    }

    fn random(prefix: &str, rng: &mut impl Rng) -> Self {
        let mut suffix = String::with_capacity(9);
        for i in 0..8 {
            if i == 4 {
                suffix.push('-');
            }
            suffix.push(SUFFIX_ALPHABET[rng.gen_range(0..SUFFIX_ALPHABET.len())] as char);
        }
        Doi {
            prefix: prefix.to_owned(),
            suffix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn suffix(&self) -> &str {
        &self.suffix
    }

    /// File stem used under `certificates/`.
    pub fn file_stem(&self) -> String {
        format!("{}__{}", self.prefix, self.suffix)
    }
}

impl FromStr for Doi {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (prefix, suffix) = s
            .split_once('/')
            .ok_or_else(|| Error::Format(format!("{s:?} is not a DOI (expected prefix/suffix)")))?;
        Doi::new(prefix, suffix)
    }
}

impl fmt::Display for Doi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.prefix, self.suffix)
    }
}

impl fmt::Debug for Doi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Doi({self})")
    }
}

impl Serialize for Doi {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Doi {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub doi: Doi,
    pub badge: BadgeLevel,
    pub roots: Vec<ArtifactId>,
    pub trace_digest: String,
    pub issued_at: Timestamp,
    pub issuer: String,
    pub report: CompletenessReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyOutcome {
    Valid,
    TraceChanged,
    StoreCorrupt,
}

/// External identifier service. One idempotent call per identifier.
pub trait RemoteRegistrar {
    fn register(&self, doi: &Doi, metadata: &serde_json::Value) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
enum RegistryEvent {
    Mint {
        doi: Doi,
        at: Timestamp,
    },
    Issue {
        doi: Doi,
        trace_digest: String,
        at: Timestamp,
    },
}

/// Local append-only identifier registry in `certificates/registry.jsonl`.
pub struct Registrar {
    dir: PathBuf,
    log_path: PathBuf,
    lock_path: PathBuf,
    minted: HashSet<Doi>,
    issued: HashSet<Doi>,
    read_offset: u64,
    remote: Option<Box<dyn RemoteRegistrar>>,
}

impl Registrar {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let mut r = Registrar {
            dir: dir.to_path_buf(),
            log_path: dir.join("registry.jsonl"),
            lock_path: dir.join("LOCK"),
            minted: HashSet::new(),
            issued: HashSet::new(),
            read_offset: 0,
            remote: None,
        };
        r.catch_up()?;
        Ok(r)
    }

    pub fn with_remote(mut self, remote: Box<dyn RemoteRegistrar>) -> Self {
        self.remote = Some(remote);
        self
    }

    pub fn is_minted(&self, doi: &Doi) -> bool {
        self.minted.contains(doi)
    }

    pub fn certificate_path(&self, doi: &Doi) -> PathBuf {
        self.dir.join(format!("{}.json", doi.file_stem()))
    }

    /// Reads events appended since the last look, including other writers'.
    fn catch_up(&mut self) -> Result<()> {
        let mut f = match File::open(&self.log_path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(Error::io(&self.log_path, e)),
        };
        f.seek(SeekFrom::Start(self.read_offset)).at(&self.log_path)?;
        let mut tail = Vec::new();
        f.read_to_end(&mut tail).at(&self.log_path)?;
        let mut consumed = 0;
        for line in tail.split_inclusive(|&b| b == b'\n') {
            if !line.ends_with(b"\n") {
                break;
            }
            consumed += line.len();
            match serde_json::from_slice::<RegistryEvent>(line) {
                Ok(RegistryEvent::Mint { doi, .. }) => {
                    self.minted.insert(doi);
                }
                Ok(RegistryEvent::Issue { doi, .. }) => {
                    self.minted.insert(doi.clone());
                    self.issued.insert(doi);
                }
                Err(e) => return Err(Error::Registrar(format!("unreadable registry line: {e}"))),
            }
        }
        self.read_offset += consumed as u64;
        Ok(())
    }

    fn append(&mut self, event: &RegistryEvent, sync: bool) -> Result<()> {
        let mut line = to_canonical_vec(event)?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.log_path)
            .map_err(|e| Error::Registrar(format!("{}: {e}", self.log_path.display())))?;
        f.write_all(&line)
            .map_err(|e| Error::Registrar(format!("{}: {e}", self.log_path.display())))?;
        if sync {
            f.sync_data()
                .map_err(|e| Error::Registrar(format!("{}: {e}", self.log_path.display())))?;
        }
        self.read_offset += line.len() as u64;
        Ok(())
    }

    /// Mints a fresh identifier under `prefix`, unique within this registry.
    pub fn mint_identifier(&mut self, prefix: &str) -> Result<Doi> {
        check_prefix(prefix)?;
        let _lock = LockGuard::acquire(&self.lock_path)?;
        self.catch_up()?;
        let mut rng = OsRng;
        let doi = loop {
            let candidate = Doi::random(prefix, &mut rng);
            if !self.minted.contains(&candidate) {
                break candidate;
            }
        };
        self.append(
            &RegistryEvent::Mint {
                doi: doi.clone(),
                at: Timestamp::now(),
            },
            false,
        )?;
        self.minted.insert(doi.clone());
        Ok(doi)
    }

    /// Persists a certificate under a minted, not-yet-used identifier.
    pub fn issue_certificate(&mut self, report: &CompletenessReport, doi: &Doi, issuer: &str) -> Result<Certificate> {
        if report.badge == BadgeLevel::Fragment {
            let first = report
                .findings
                .iter()
                .find(|f| f.severity == Severity::Error)
                .map(|f| format!(": {} ({})", f.message, f.rule))
                .unwrap_or_default();
            return Err(Error::Uncertifiable(format!("trace grades FRAGMENT{first}")));
        }
        let _lock = LockGuard::acquire(&self.lock_path)?;
        self.catch_up()?;
        if !self.minted.contains(doi) {
            return Err(Error::Registrar(format!("{doi} was not minted by this registry")));
        }
        if self.issued.contains(doi) {
            return Err(Error::Registrar(format!("{doi} already carries a certificate")));
        }
        let cert = Certificate {
            doi: doi.clone(),
            badge: report.badge,
            roots: report.roots.clone(),
            trace_digest: report.trace_digest.clone(),
            issued_at: Timestamp::now(),
            issuer: issuer.to_owned(),
            report: report.clone(),
        };
        let bytes = to_canonical_vec(&cert)?;
        let path = self.certificate_path(doi);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::Registrar(format!("{}: {e}", path.display())))?;
        f.write_all(&bytes)
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::Registrar(format!("{}: {e}", path.display())))?;
        if let Some(remote) = &self.remote {
            if let Err(e) = remote.register(doi, &serde_json::to_value(&cert)?) {
                // leave the identifier issuable for a retry
                let _ = fs::remove_file(&path);
                return Err(e);
            }
        }
        self.append(
            &RegistryEvent::Issue {
                doi: doi.clone(),
                trace_digest: cert.trace_digest.clone(),
                at: cert.issued_at,
            },
            true,
        )?;
        self.issued.insert(doi.clone());
        Ok(cert)
    }

    pub fn load_certificate(&self, doi: &Doi) -> Result<Certificate> {
        let path = self.certificate_path(doi);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("certificate {doi}")))
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        serde_json::from_slice(&bytes).map_err(|e| Error::Schema(format!("certificate {doi}: {e}")))
    }
}

impl Repository {
    pub fn registrar(&self) -> Result<Registrar> {
        Registrar::open(&self.root().join("certificates"))
    }

    /// Re-exports and re-verifies the trace a certificate covers.
    pub fn verify_certificate(&self, cert: &Certificate) -> Result<VerifyOutcome> {
        let graph = match self.trace_ancestry(&cert.roots) {
            Ok(g) => g,
            Err(Error::NotFound(_)) => return Ok(VerifyOutcome::TraceChanged),
            Err(e) => return Err(e),
        };
        if TraceDocument::from_graph(&graph).digest()? != cert.trace_digest {
            return Ok(VerifyOutcome::TraceChanged);
        }
        let intact = object_status(self, &graph).values().all(|s| *s == VerifyResult::Ok);
        Ok(if intact {
            VerifyOutcome::Valid
        } else {
            VerifyOutcome::StoreCorrupt
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn badge_order() {
        assert!(BadgeLevel::Fragment < BadgeLevel::Partial);
        assert!(BadgeLevel::Partial < BadgeLevel::Full);
        assert_eq!(serde_json::to_string(&BadgeLevel::Full).unwrap(), "\"FULL\"");
    }

    #[test]
    fn doi_parsing() {
        let d: Doi = "10.57785/96bw-7571".parse().unwrap();
        assert_eq!(d.prefix(), "10.57785");
        assert_eq!(d.to_string(), "10.57785/96bw-7571");
        assert!("10.57785/96BW-7571".parse::<Doi>().is_err());
        assert!("10.123/abcd-efgh".parse::<Doi>().is_err());
        assert!("doi:10.5/abcd-efgh".parse::<Doi>().is_err());
        assert!(matches!(check_prefix("doi:10.5"), Err(Error::Format(_))));
        assert!(check_prefix("10.1234567890").is_err());
    }

    #[test]
    fn mint_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = Registrar::open(dir.path()).unwrap();
        let a = reg.mint_identifier("10.57785").unwrap();
        let b = reg.mint_identifier("10.57785").unwrap();
        assert_ne!(a, b);
        let reopened = Registrar::open(dir.path()).unwrap();
        assert!(reopened.is_minted(&a) && reopened.is_minted(&b));
        assert!(matches!(reg.mint_identifier("doi:10.5"), Err(Error::Format(_))));
    }

    #[test]
    fn two_registrars_see_each_other() {
        let dir = tempfile::tempdir().unwrap();
        let mut r1 = Registrar::open(dir.path()).unwrap();
        let mut r2 = Registrar::open(dir.path()).unwrap();
        let a = r1.mint_identifier("10.5072").unwrap();
        let _ = r2.mint_identifier("10.5072").unwrap();
        assert!(r2.is_minted(&a));
    }
}
