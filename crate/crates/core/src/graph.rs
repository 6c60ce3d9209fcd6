//! Process records and the bipartite artifact/process trace graph.
//!
//! Data flows along `inputs -> process -> outputs`. Artifacts referenced only
//! from execution details (code bundles, manifests, captured streams) belong
//! to a trace but are not data-flow nodes.
//!
//! An output that is also one of the same record's inputs is a pass-through:
//! it does not make the record a producer of that artifact. Several records
//! may produce the same artifact only when they are runs of the same step
//! (see [`ProcessBody::step_key`]).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::canonical::canonical_digest;
use crate::digest::{ArtifactId, ProcessId};
use crate::error::{Error, Result};
use crate::store::Artifact;
use crate::time::Timestamp;

pub const INGESTION: &str = "ingestion";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependencySpec {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentDescriptor {
    pub os_name: String,
    pub os_version: String,
    pub architecture: String,
    pub hardware: BTreeMap<String, String>,
    pub tool_versions: BTreeMap<String, String>,
}

impl EnvironmentDescriptor {
    pub fn is_described(&self) -> bool {
        let known = |s: &str| !s.is_empty() && s != "unknown";
        known(&self.os_name) && known(&self.architecture)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub values: BTreeMap<String, String>,
    #[serde(deserialize_with = "crate::canonical::present")]
    pub file: Option<ArtifactId>,
}

/// The five recorded categories of how a step was executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionDetails {
    pub code_ref: ArtifactId,
    pub config: StepConfig,
    pub dependencies: Vec<DependencySpec>,
    pub environment: EnvironmentDescriptor,
    pub data_dependencies: Vec<ArtifactId>,
    pub additional_components: Vec<ArtifactId>,
}

impl ExecutionDetails {
    /// Names of categories that carry no information.
    pub fn missing_categories(&self) -> Vec<&'static str> {
        let mut missing = Vec::new();
        if self.dependencies.is_empty() {
            missing.push("dependencies");
        }
        if !self.environment.is_described() {
            missing.push("environment");
        }
        if self.data_dependencies.is_empty() {
            missing.push("data_dependencies");
        }
        if self.additional_components.is_empty() {
            missing.push("additional_components");
        }
        missing
    }

    fn referenced(&self) -> impl Iterator<Item = &ArtifactId> {
        std::iter::once(&self.code_ref)
            .chain(self.config.file.iter())
            .chain(self.data_dependencies.iter())
            .chain(self.additional_components.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamRefs {
    pub stdout: ArtifactId,
    pub stderr: ArtifactId,
}

/// Everything about a step except its id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessBody {
    pub transformation_type: String,
    pub inputs: Vec<ArtifactId>,
    /// Staging file names, aligned with `inputs` (empty when unknown).
    pub input_names: Vec<String>,
    pub outputs: Vec<ArtifactId>,
    /// Declared output file names, aligned with `outputs` (empty when unknown).
    pub output_names: Vec<String>,
    #[serde(deserialize_with = "crate::canonical::present")]
    pub details: Option<ExecutionDetails>,
    pub agent: String,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub exit_status: i32,
    pub nondeterministic: bool,
    #[serde(deserialize_with = "crate::canonical::present")]
    pub streams: Option<StreamRefs>,
}

impl ProcessBody {
    pub fn is_ingestion(&self) -> bool {
        self.transformation_type == INGESTION
    }

    /// Outputs that this record actually produces (pass-throughs excluded).
    pub fn produced(&self) -> impl Iterator<Item = &ArtifactId> {
        self.outputs.iter().filter(move |o| !self.inputs.contains(o))
    }

    /// Every artifact referenced by the record.
    pub fn referenced(&self) -> BTreeSet<&ArtifactId> {
        let mut ids: BTreeSet<&ArtifactId> = self.inputs.iter().chain(self.outputs.iter()).collect();
        if let Some(d) = &self.details {
            ids.extend(d.referenced());
        }
        if let Some(s) = &self.streams {
            ids.insert(&s.stdout);
            ids.insert(&s.stderr);
        }
        ids
    }

    /// Identity of the step independent of when it ran: records with equal
    /// keys are re-runs of one step and may share outputs.
    pub fn step_key(&self) -> Result<String> {
        if self.is_ingestion() {
            return Ok(INGESTION.to_owned());
        }
        let mut inputs: Vec<&ArtifactId> = self.inputs.iter().collect();
        inputs.sort();
        let details = self.details.as_ref();
        canonical_digest(&serde_json::json!({
            "type": self.transformation_type,
            "inputs": inputs,
            "code": details.map(|d| &d.code_ref),
            "config": details.map(|d| &d.config),
        }))
    }

    /// Field-level invariants of a single record.
    pub fn check_fields(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.transformation_type.trim().is_empty() {
            return fail("transformation_type must not be empty".into());
        }
        if self.finished_at < self.started_at {
            return fail("finished_at precedes started_at".into());
        }
        if self.exit_status == 0 && self.outputs.is_empty() {
            return fail("successful record has no outputs".into());
        }
        if self.is_ingestion() {
            if !self.inputs.is_empty() {
                return fail("ingestion record must not have inputs".into());
            }
        } else {
            if self.inputs.is_empty() {
                return fail(format!("{} record has no inputs", self.transformation_type));
            }
            if self.details.is_none() {
                return fail(format!("{} record lacks execution details", self.transformation_type));
            }
        }
        if !self.input_names.is_empty() && self.input_names.len() != self.inputs.len() {
            return fail("input_names not aligned with inputs".into());
        }
        if !self.output_names.is_empty() && self.output_names.len() != self.outputs.len() {
            return fail("output_names not aligned with outputs".into());
        }
        if let Some(d) = &self.details {
            for dep in &d.dependencies {
                if dep.name.is_empty() || dep.version.is_empty() {
                    return fail("dependency with empty name or version".into());
                }
            }
            if d.environment.os_name.is_empty() || d.environment.architecture.is_empty() {
                return fail("environment lacks os_name or architecture".into());
            }
        }
        Ok(())
    }

    pub fn seal(self) -> Result<ProcessRecord> {
        let id = ProcessId::from_hex_unchecked(canonical_digest(&self)?);
        Ok(ProcessRecord {
            process_id: id,
            body: self,
        })
    }
}

/// One transformation step; the id is the digest of the canonical body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessRecord {
    pub process_id: ProcessId,
    pub body: ProcessBody,
}

impl ProcessRecord {
    pub fn computed_id(&self) -> Result<ProcessId> {
        Ok(ProcessId::from_hex_unchecked(canonical_digest(&self.body)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Closure,
    Cycle,
    Bipartite,
    SingleProducer,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub node: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// A set of artifacts and processes, normally the ancestry of some roots.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceGraph {
    pub roots: Vec<ArtifactId>,
    pub artifacts: BTreeMap<ArtifactId, Artifact>,
    pub processes: BTreeMap<ProcessId, ProcessRecord>,
    /// Referenced artifacts whose object bytes were absent when the graph
    /// was assembled.
    pub missing_objects: BTreeSet<ArtifactId>,
}

impl TraceGraph {
    /// Every artifact id referenced by a process or listed as a root.
    pub fn referenced_ids(&self) -> BTreeSet<ArtifactId> {
        let mut ids: BTreeSet<ArtifactId> = self.roots.iter().cloned().collect();
        for p in self.processes.values() {
            ids.extend(p.body.referenced().into_iter().cloned());
        }
        ids
    }

    /// Artifacts on data-flow edges, plus roots.
    pub fn data_artifacts(&self) -> BTreeSet<ArtifactId> {
        let mut ids: BTreeSet<ArtifactId> = self.roots.iter().cloned().collect();
        for p in self.processes.values() {
            ids.extend(p.body.inputs.iter().cloned());
            ids.extend(p.body.outputs.iter().cloned());
        }
        ids
    }

    /// Referenced ids with no artifact record in the graph.
    pub fn undefined_ids(&self) -> BTreeSet<ArtifactId> {
        self.referenced_ids()
            .into_iter()
            .filter(|id| !self.artifacts.contains_key(id))
            .collect()
    }

    pub fn producers(&self) -> BTreeMap<&ArtifactId, Vec<&ProcessRecord>> {
        producers_of(self.processes.values())
    }

    /// Artifacts on data-flow edges that no process in the graph produces.
    pub fn leaves(&self) -> BTreeSet<ArtifactId> {
        let producers = self.producers();
        self.data_artifacts()
            .into_iter()
            .filter(|a| !producers.contains_key(a))
            .collect()
    }

    /// Processes ordered so that every process follows the producers of its
    /// inputs; ties broken by depth then id. Fails on a cycle.
    pub fn topological_order(&self) -> Result<Vec<&ProcessRecord>> {
        topological_order(self.processes.values())
    }

    /// Induced sub-trace of everything upstream of `roots`.
    pub fn ancestry(&self, roots: &[ArtifactId]) -> Result<TraceGraph> {
        let producers = self.producers();
        for r in roots {
            if !self.artifacts.contains_key(r) && !producers.contains_key(r) {
                return Err(Error::NotFound(format!("artifact {r}")));
            }
        }
        let procs = ancestor_processes(roots, &producers);
        let mut out = TraceGraph {
            roots: sorted_unique(roots),
            processes: procs.into_iter().map(|p| (p.process_id.clone(), p.clone())).collect(),
            ..Default::default()
        };
        for id in out.referenced_ids() {
            if let Some(a) = self.artifacts.get(&id) {
                out.artifacts.insert(id.clone(), a.clone());
            }
            if self.missing_objects.contains(&id) {
                out.missing_objects.insert(id);
            }
        }
        Ok(out)
    }
}

pub(crate) fn sorted_unique(ids: &[ArtifactId]) -> Vec<ArtifactId> {
    let set: BTreeSet<ArtifactId> = ids.iter().cloned().collect();
    set.into_iter().collect()
}

pub(crate) fn producers_of<'a>(
    records: impl IntoIterator<Item = &'a ProcessRecord>,
) -> BTreeMap<&'a ArtifactId, Vec<&'a ProcessRecord>> {
    let mut map: BTreeMap<&ArtifactId, Vec<&ProcessRecord>> = BTreeMap::new();
    for p in records {
        for o in p.body.produced() {
            let entry = map.entry(o).or_default();
            if !entry.iter().any(|q| q.process_id == p.process_id) {
                entry.push(p);
            }
        }
    }
    map
}

/// Backward reachability over data-flow edges.
pub(crate) fn ancestor_processes<'a>(
    roots: &[ArtifactId],
    producers: &BTreeMap<&ArtifactId, Vec<&'a ProcessRecord>>,
) -> Vec<&'a ProcessRecord> {
    let mut seen_artifacts: BTreeSet<&ArtifactId> = BTreeSet::new();
    let mut seen_procs: BTreeMap<&ProcessId, &'a ProcessRecord> = BTreeMap::new();
    let mut queue: VecDeque<&ArtifactId> = roots.iter().collect();
    while let Some(a) = queue.pop_front() {
        if !seen_artifacts.insert(a) {
            continue;
        }
        for p in producers.get(a).into_iter().flatten() {
            if seen_procs.insert(&p.process_id, p).is_none() {
                queue.extend(p.body.inputs.iter());
            }
        }
    }
    seen_procs.into_values().collect()
}

pub(crate) fn topological_order<'a>(
    records: impl IntoIterator<Item = &'a ProcessRecord>,
) -> Result<Vec<&'a ProcessRecord>> {
    let records: Vec<&ProcessRecord> = records.into_iter().collect();
    let producers = producers_of(records.iter().copied());
    // upstream[p] = processes producing any input of p
    let mut upstream: BTreeMap<&ProcessId, BTreeSet<&ProcessId>> = BTreeMap::new();
    let mut downstream: BTreeMap<&ProcessId, BTreeSet<&ProcessId>> = BTreeMap::new();
    for p in &records {
        let ups = upstream.entry(&p.process_id).or_default();
        for i in &p.body.inputs {
            for q in producers.get(i).into_iter().flatten() {
                if q.process_id != p.process_id {
                    ups.insert(&q.process_id);
                    downstream.entry(&q.process_id).or_default().insert(&p.process_id);
                } else {
                    // A record consuming its own produced output is a self-loop.
                    return Err(Error::Cycle(format!(
                        "process {} consumes its own output",
                        p.process_id
                    )));
                }
            }
        }
    }
    let by_id: BTreeMap<&ProcessId, &ProcessRecord> = records.iter().map(|p| (&p.process_id, *p)).collect();
    let mut pending: BTreeMap<&ProcessId, usize> = upstream.iter().map(|(k, v)| (*k, v.len())).collect();
    let mut depth: BTreeMap<&ProcessId, usize> = BTreeMap::new();
    let mut ready: BTreeSet<(usize, &ProcessId)> =
        pending.iter().filter(|(_, n)| **n == 0).map(|(k, _)| (0, *k)).collect();
    let mut order = Vec::with_capacity(records.len());
    while let Some(next) = ready.pop_first() {
        let (d, id) = next;
        order.push(by_id[id]);
        for down in downstream.get(id).into_iter().flatten() {
            let nd = depth.entry(down).or_insert(0);
            *nd = (*nd).max(d + 1);
            let n = pending.get_mut(down).expect("known process");
            *n -= 1;
            if *n == 0 {
                ready.insert((*nd, down));
            }
        }
    }
    if order.len() != by_id.len() {
        let stuck: Vec<String> = pending
            .iter()
            .filter(|(_, n)| **n > 0)
            .map(|(k, _)| k.short(12).to_owned())
            .collect();
        return Err(Error::Cycle(format!("processes on a cycle: {}", stuck.join(", "))));
    }
    Ok(order)
}

/// Structural check of a trace graph; pure in its input.
pub fn validate_graph(graph: &TraceGraph) -> ValidationReport {
    let mut violations = BTreeSet::new();

    let mut unresolved = graph.undefined_ids();
    unresolved.extend(graph.missing_objects.iter().cloned());
    for id in unresolved {
        violations.insert(Violation {
            kind: ViolationKind::Closure,
            node: id.to_string(),
            message: if graph.artifacts.contains_key(&id) {
                format!("object bytes for {id} are missing")
            } else {
                format!("artifact {id} is referenced but not defined")
            },
        });
    }

    let process_ids: BTreeSet<&str> = graph.processes.keys().map(|p| p.as_str()).collect();
    for id in graph.referenced_ids() {
        if process_ids.contains(id.as_str()) {
            violations.insert(Violation {
                kind: ViolationKind::Bipartite,
                node: id.to_string(),
                message: format!("{id} is used both as an artifact and a process"),
            });
        }
    }
    for (id, p) in &graph.processes {
        if &p.process_id != id {
            violations.insert(Violation {
                kind: ViolationKind::Bipartite,
                node: id.to_string(),
                message: "process keyed under a different id".into(),
            });
        }
    }

    for (artifact, procs) in graph.producers() {
        let mut keys = BTreeSet::new();
        for p in &procs {
            keys.insert(p.body.step_key().unwrap_or_default());
        }
        if keys.len() > 1 {
            let names: Vec<&str> = procs.iter().map(|p| p.process_id.short(12)).collect();
            violations.insert(Violation {
                kind: ViolationKind::SingleProducer,
                node: artifact.to_string(),
                message: format!("produced by unrelated processes {}", names.join(", ")),
            });
        }
    }

    if let Err(Error::Cycle(msg)) = graph.topological_order() {
        violations.insert(Violation {
            kind: ViolationKind::Cycle,
            node: String::new(),
            message: msg,
        });
    }

    ValidationReport {
        violations: violations.into_iter().collect(),
    }
}
