//! Re-execution of recorded steps with bit-exact output comparison.
//!
//! Replays never touch the ledger or recorded objects. Each attempt lives in
//! `replays/<process_id>/<attempt>/` with the produced bytes quarantined
//! under `objects/<digest>` and a canonical `report.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_vec;
use crate::codebundle::CodeBundle;
use crate::digest::{sha256_reader, ArtifactId, ProcessId};
use crate::error::{Error, IoContext, Result};
use crate::exec::{self, Invocation};
use crate::fsutil::safe_relative;
use crate::graph::{validate_graph, EnvironmentDescriptor, ProcessRecord};
use crate::repo::Repository;
use crate::runner::snapshot_environment;
use crate::store::VerifyResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentCheck {
    Strict,
    Warn,
    Skip,
}

impl FromStr for EnvironmentCheck {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(EnvironmentCheck::Strict),
            "warn" => Ok(EnvironmentCheck::Warn),
            "skip" => Ok(EnvironmentCheck::Skip),
            other => Err(Error::Format(format!("unknown environment check {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayPolicy {
    pub environment_check: EnvironmentCheck,
    pub timeout_seconds: u64,
    pub keep_workdirs: bool,
}

impl Default for ReplayPolicy {
    fn default() -> Self {
        ReplayPolicy {
            environment_check: EnvironmentCheck::Warn,
            timeout_seconds: 3600,
            keep_workdirs: false,
        }
    }
}

impl ReplayPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_seconds == 0 {
            return Err(Error::Validation("replay timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayStatus {
    Match,
    Divergent,
    Unverifiable,
    EnvMismatch,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputComparison {
    pub name: String,
    pub recorded: ArtifactId,
    pub replayed: Option<ArtifactId>,
    pub equal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub process_id: ProcessId,
    pub status: ReplayStatus,
    pub output_comparisons: Vec<OutputComparison>,
    pub notes: Vec<String>,
}

/// Differences between a recorded and a current environment, split into
/// the fields strict checking enforces and the rest.
fn environment_differences(
    recorded: &EnvironmentDescriptor,
    current: &EnvironmentDescriptor,
) -> (Vec<String>, Vec<String>) {
    let mut enforced = Vec::new();
    let mut informative = Vec::new();
    if recorded.os_name != current.os_name {
        enforced.push(format!("os_name {:?} != {:?}", recorded.os_name, current.os_name));
    }
    if recorded.architecture != current.architecture {
        enforced.push(format!(
            "architecture {:?} != {:?}",
            recorded.architecture, current.architecture
        ));
    }
    for (tool, version) in &recorded.tool_versions {
        let now = current.tool_versions.get(tool).map(String::as_str).unwrap_or("absent");
        if now != version {
            enforced.push(format!("tool {tool} {version:?} != {now:?}"));
        }
    }
    if recorded.os_version != current.os_version {
        informative.push(format!(
            "os_version {:?} != {:?}",
            recorded.os_version, current.os_version
        ));
    }
    for (k, v) in &recorded.hardware {
        let now = current.hardware.get(k).map(String::as_str).unwrap_or("absent");
        if now != v {
            informative.push(format!("hardware {k} {v:?} != {now:?}"));
        }
    }
    (enforced, informative)
}

impl Repository {
    fn new_attempt_dir(&self, pid: &ProcessId) -> Result<PathBuf> {
        let base = self.root().join("replays").join(pid.as_str());
        fs::create_dir_all(&base).at(&base)?;
        for n in 1u32.. {
            let dir = base.join(format!("{n:04}"));
            match fs::create_dir(&dir) {
                Ok(()) => return Ok(dir),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(Error::io(dir, e)),
            }
        }
        unreachable!()
    }

    /// Replays one recorded step against recorded inputs.
    pub fn replay_process(&self, pid: &ProcessId, policy: &ReplayPolicy) -> Result<ReplayResult> {
        let record = self.process(pid)?;
        self.replay_record(&record, &BTreeMap::new(), policy)
    }

    /// `substitutes` maps recorded input ids to replayed bytes to stage in
    /// their place.
    fn replay_record(
        &self,
        record: &ProcessRecord,
        substitutes: &BTreeMap<ArtifactId, PathBuf>,
        policy: &ReplayPolicy,
    ) -> Result<ReplayResult> {
        policy.validate()?;
        let body = &record.body;
        let pid = &record.process_id;
        if body.is_ingestion() {
            return Err(Error::NotReplayable(format!("{pid} is an ingestion record")));
        }
        let details = body
            .details
            .as_ref()
            .ok_or_else(|| Error::NotReplayable(format!("{pid} has no execution details")))?;
        if body.input_names.len() != body.inputs.len() || body.output_names.len() != body.outputs.len() {
            return Err(Error::NotReplayable(format!(
                "{pid} does not record its staging layout"
            )));
        }
        let store = self.store();
        for id in body
            .inputs
            .iter()
            .filter(|i| !substitutes.contains_key(*i))
            .chain([&details.code_ref])
        {
            match store.verify_artifact(id) {
                VerifyResult::Ok => {}
                VerifyResult::Corrupt => return Err(Error::Integrity(format!("object {id} fails its digest check"))),
                VerifyResult::Missing => return Err(Error::Integrity(format!("object {id} is missing"))),
            }
        }
        let code = CodeBundle::from_bytes(&store.get_artifact(&details.code_ref)?)?;

        let mut notes = Vec::new();
        if policy.environment_check != EnvironmentCheck::Skip {
            let probes: BTreeMap<String, Vec<String>> = details
                .environment
                .tool_versions
                .keys()
                .map(|tool| {
                    let cmd = self
                        .config()
                        .tool_probes
                        .get(tool)
                        .cloned()
                        .unwrap_or_else(|| vec![tool.clone(), "--version".into()]);
                    (tool.clone(), cmd)
                })
                .collect();
            let current = snapshot_environment(&probes);
            let (enforced, informative) = environment_differences(&details.environment, &current);
            if policy.environment_check == EnvironmentCheck::Strict && !enforced.is_empty() {
                return Ok(ReplayResult {
                    process_id: pid.clone(),
                    status: ReplayStatus::EnvMismatch,
                    output_comparisons: vec![],
                    notes: enforced.into_iter().map(|d| format!("environment: {d}")).collect(),
                });
            }
            notes.extend(
                enforced
                    .into_iter()
                    .chain(informative)
                    .map(|d| format!("environment: {d}")),
            );
        }

        let attempt = self.new_attempt_dir(pid)?;
        let work = attempt.join("work");
        fs::create_dir_all(&work).at(&work)?;
        for (id, name) in body.inputs.iter().zip(&body.input_names) {
            let rel = safe_relative(name)
                .ok_or_else(|| Error::Integrity(format!("unsafe staging name {name:?} in {pid}")))?;
            let dest = work.join(rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent).at(parent)?;
            }
            match substitutes.get(id) {
                Some(src) => {
                    fs::copy(src, &dest).at(&dest)?;
                    notes.push(format!("input {name} taken from upstream replay"));
                }
                None => store.export_object(id, &dest)?,
            }
        }
        code.materialize(&work)?;

        let outcome = exec::run(Invocation {
            command: &code.command,
            workdir: &work,
            env: exec::step_environment(&work, &details.config.values),
            timeout: Duration::from_secs(policy.timeout_seconds),
            stdout_path: &attempt.join("stdout"),
            stderr_path: &attempt.join("stderr"),
        })
        .map_err(|e| Error::Replay {
            message: format!("could not launch {pid}: {e}"),
            completed: vec![],
        })?;

        let quarantine = attempt.join("objects");
        fs::create_dir_all(&quarantine).at(&quarantine)?;
        let mut comparisons = Vec::with_capacity(body.outputs.len());
        for (recorded, name) in body.outputs.iter().zip(&body.output_names) {
            let path = safe_relative(name).map(|rel| work.join(rel));
            let replayed = match path.filter(|p| p.is_file()) {
                Some(p) => {
                    let f = fs::File::open(&p).at(&p)?;
                    let id = ArtifactId::from_hex_unchecked(sha256_reader(f).at(&p)?);
                    let dest = quarantine.join(id.as_str());
                    if !dest.exists() {
                        fs::copy(&p, &dest).at(&dest)?;
                    }
                    Some(id)
                }
                None => None,
            };
            comparisons.push(OutputComparison {
                name: name.clone(),
                equal: replayed.as_ref() == Some(recorded),
                recorded: recorded.clone(),
                replayed,
            });
        }

        let status = if !outcome.success() {
            notes.push(format!("command {}", outcome.describe()));
            ReplayStatus::Failed
        } else if body.nondeterministic {
            notes.push("step is recorded as nondeterministic; outputs not verified".into());
            ReplayStatus::Unverifiable
        } else if comparisons.iter().all(|c| c.equal) {
            ReplayStatus::Match
        } else {
            ReplayStatus::Divergent
        };
        let result = ReplayResult {
            process_id: pid.clone(),
            status,
            output_comparisons: comparisons,
            notes,
        };
        let report = attempt.join("report.json");
        fs::write(&report, to_canonical_vec(&result)?).at(&report)?;
        if !policy.keep_workdirs {
            let _ = fs::remove_dir_all(&work);
        }
        Ok(result)
    }

    /// Replays every non-ingestion step upstream of `roots`, in dependency
    /// order. Downstream steps consume replayed bytes wherever an upstream
    /// step diverged.
    pub fn replay_subgraph(&self, roots: &[ArtifactId], policy: &ReplayPolicy) -> Result<Vec<ReplayResult>> {
        policy.validate()?;
        let graph = self.trace_ancestry(roots)?;
        let report = validate_graph(&graph);
        if let Some(v) = report.violations.first() {
            return Err(Error::Integrity(format!(
                "trace is not replayable: {} ({} violation(s))",
                v.message,
                report.violations.len()
            )));
        }
        let order = graph.topological_order()?;
        let mut substitutes: BTreeMap<ArtifactId, PathBuf> = BTreeMap::new();
        let mut results = Vec::new();
        for record in order.into_iter().filter(|p| !p.body.is_ingestion()) {
            let result = match self.replay_record(record, &substitutes, policy) {
                Ok(r) => r,
                Err(Error::Replay { message, .. }) => {
                    return Err(Error::Replay {
                        message,
                        completed: results,
                    })
                }
                Err(e) => return Err(e),
            };
            if result.status == ReplayStatus::Divergent {
                let dir = self.latest_attempt(&record.process_id)?.join("objects");
                for c in &result.output_comparisons {
                    if let (false, Some(replayed)) = (c.equal, &c.replayed) {
                        substitutes.insert(c.recorded.clone(), dir.join(replayed.as_str()));
                    }
                }
            }
            results.push(result);
        }
        Ok(results)
    }

    fn latest_attempt(&self, pid: &ProcessId) -> Result<PathBuf> {
        let base = self.root().join("replays").join(pid.as_str());
        let mut names: Vec<String> = fs::read_dir(&base)
            .at(&base)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names
            .pop()
            .map(|n| base.join(n))
            .ok_or_else(|| Error::NotFound(format!("no replay attempts for {pid}")))
    }
}

/// Attempt directories for a process, oldest first.
pub fn attempts(root: &Path, pid: &ProcessId) -> Vec<PathBuf> {
    let base = root.join("replays").join(pid.as_str());
    let mut dirs: Vec<PathBuf> = fs::read_dir(base)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    dirs.sort();
    dirs
}
