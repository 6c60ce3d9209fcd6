//! Repository layout and the operations that span store and ledger.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::{ArtifactId, ProcessId};
use crate::error::{Error, IoContext, Result};
use crate::graph::{ancestor_processes, sorted_unique, ProcessRecord, TraceGraph};
use crate::ledger::{Ledger, LedgerSnapshot, RefRole};
use crate::store::{ArtifactStore, DEFAULT_MAX_OBJECT_BYTES};

pub const ROOT_ENV: &str = "CERTPRO_ROOT";
pub const DEFAULT_DIR: &str = ".certpro";
const CONFIG_FILE: &str = "config.json";
const SUBDIRS: [&str; 6] = ["objects", "meta", "ledger", "staging", "replays", "certificates"];

fn default_max_object_bytes() -> u64 {
    DEFAULT_MAX_OBJECT_BYTES
}

fn default_timeout() -> u64 {
    3600
}

fn default_true() -> bool {
    true
}

fn default_prefix() -> String {
    "10.5072".to_owned()
}

/// `config.json` at the repository root. Every field is optional on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoConfig {
    #[serde(default = "default_max_object_bytes")]
    pub max_object_bytes: u64,
    #[serde(default = "default_true")]
    pub verify_on_read: bool,
    #[serde(default = "default_timeout")]
    pub step_timeout_seconds: u64,
    /// Tool name to the command that prints its version.
    #[serde(default)]
    pub tool_probes: BTreeMap<String, Vec<String>>,
    #[serde(default = "default_prefix")]
    pub doi_prefix: String,
}

impl Default for RepoConfig {
    fn default() -> Self {
        RepoConfig {
            max_object_bytes: default_max_object_bytes(),
            verify_on_read: true,
            step_timeout_seconds: default_timeout(),
            tool_probes: BTreeMap::new(),
            doi_prefix: default_prefix(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Repository {
    root: PathBuf,
    config: RepoConfig,
    store: ArtifactStore,
    ledger: Ledger,
}

impl Repository {
    /// `$CERTPRO_ROOT`, or `./.certpro`.
    pub fn default_root() -> PathBuf {
        std::env::var_os(ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DIR))
    }

    /// Creates the layout (idempotent) and opens it.
    pub fn init(root: &Path) -> Result<Self> {
        for sub in SUBDIRS {
            let d = root.join(sub);
            fs::create_dir_all(&d).at(&d)?;
        }
        let cfg = root.join(CONFIG_FILE);
        if !cfg.exists() {
            let text = serde_json::to_string_pretty(&RepoConfig::default())?;
            fs::write(&cfg, text + "\n").at(&cfg)?;
        }
        Self::open(root)
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("ledger").is_dir() || !root.join("objects").is_dir() {
            return Err(Error::NotFound(format!(
                "no repository at {} (run `certpro init`)",
                root.display()
            )));
        }
        let cfg_path = root.join(CONFIG_FILE);
        let config = match fs::read(&cfg_path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| Error::Storage(format!("bad {}: {e}", cfg_path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => RepoConfig::default(),
            Err(e) => return Err(Error::io(cfg_path, e)),
        };
        Ok(Self::with_config(root, config))
    }

    pub fn with_config(root: &Path, config: RepoConfig) -> Self {
        let ledger = Ledger::new(&root.join("ledger"));
        let store = ArtifactStore::new(
            root,
            ledger.lock_path().to_path_buf(),
            config.max_object_bytes,
            config.verify_on_read,
        );
        Repository {
            root: root.to_path_buf(),
            config,
            store,
            ledger,
        }
    }

    /// Persists `config` to `config.json` and adopts it.
    pub fn save_config(&mut self, config: RepoConfig) -> Result<()> {
        let path = self.root.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(&config)?;
        fs::write(&path, text + "\n").at(&path)?;
        *self = Self::with_config(&self.root, config);
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RepoConfig {
        &self.config
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn snapshot(&self) -> Result<LedgerSnapshot> {
        self.ledger.load()
    }

    /// Appends one record after checking it against the store and ledger.
    pub fn record_process(&self, record: ProcessRecord) -> Result<ProcessId> {
        let ids = self.ledger.append(vec![record], &|id, role| self.resolves(id, role))?;
        Ok(ids.into_iter().next().expect("one id per record"))
    }

    pub(crate) fn resolves(&self, id: &ArtifactId, role: RefRole) -> bool {
        match role {
            RefRole::Output => self.store.contains_object(id),
            RefRole::Input | RefRole::Detail => self.store.resolves(id),
        }
    }

    pub fn process(&self, id: &ProcessId) -> Result<ProcessRecord> {
        self.snapshot()?
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("process {id}")))
    }

    /// Everything upstream of `roots`, with artifact records and object
    /// presence read from the store.
    pub fn trace_ancestry(&self, roots: &[ArtifactId]) -> Result<TraceGraph> {
        let snap = self.snapshot()?;
        self.trace_in(&snap, roots)
    }

    pub(crate) fn trace_in(&self, snap: &LedgerSnapshot, roots: &[ArtifactId]) -> Result<TraceGraph> {
        let producers = snap.producers();
        for r in roots {
            if !self.store.resolves(r) && !producers.contains_key(r) {
                return Err(Error::NotFound(format!("artifact {r}")));
            }
        }
        let mut graph = TraceGraph {
            roots: sorted_unique(roots),
            processes: ancestor_processes(roots, &producers)
                .into_iter()
                .map(|p| (p.process_id.clone(), p.clone()))
                .collect(),
            ..Default::default()
        };
        for id in graph.referenced_ids() {
            if self.store.has_record(&id) {
                graph.artifacts.insert(id.clone(), self.store.stat_artifact(&id)?);
            }
            if !self.store.contains_object(&id) {
                graph.missing_objects.insert(id);
            }
        }
        Ok(graph)
    }

    /// The full ledger as one graph, rooted at every data artifact.
    pub fn full_graph(&self) -> Result<TraceGraph> {
        let snap = self.snapshot()?;
        let mut roots: Vec<ArtifactId> = Vec::new();
        for r in snap.records() {
            roots.extend(r.body.outputs.iter().cloned());
        }
        self.trace_in(&snap, &roots)
    }
}
