#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use certpro_core::{
    ArtifactDescription, ArtifactId, DependencySpec, EnvironmentDescriptor, ExecutionDetails, ProcessBody,
    ProcessRecord, Repository, StepConfig, StepSpec, SubjectMetadata, Timestamp, INGESTION,
};
use tempfile::TempDir;

pub fn repo() -> (TempDir, Repository) {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::init(&dir.path().join(".certpro")).unwrap();
    (dir, repo)
}

pub fn write_script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    path
}

pub fn ledger_bytes(repo: &Repository) -> Option<Vec<u8>> {
    fs::read(repo.ledger().log_path()).ok()
}

pub const COMBINE: &str = r##"#!/bin/sh
set -e
out=$1; shift
echo "sample,cell,fsc,ssc,cd4" > "$out"
for f in "$@"; do tail -n +2 "$f" | sed "s/^/${f%.csv},/" >> "$out"; done
"##;

pub const GATE: &str = r##"#!/bin/sh
set -e
echo "sample,cells,positive" > "$2"
awk -F, -v t="${CERTPRO_CONFIG_THRESHOLD:-4}" 'NR>1 { n[$1]++; if ($5+0>t) p[$1]++ } END { for (s in n) print s "," n[s] "," p[s]+0 }' "$1" | LC_ALL=C sort >> "$2"
"##;

pub const PLOT: &str = r##"#!/bin/sh
awk -F, 'NR>1 { printf "%s |", $1; for (i=0;i<$3+0;i++) printf "#"; print "" }' "$1" > "$2"
"##;

pub const MANIFEST: &str = "# analysis toolchain\nawk=5.1\ncoreutils=9.4\n";

/// Raw acquisition file `i` of the three-sample fixture.
pub fn raw_csv(i: usize) -> String {
    let rows = [(101, 20, 5), (30, 40, 9), (55, 60, 4)];
    let mut s = String::from("cell,fsc,ssc,cd4\n");
    for (n, (fsc, ssc, cd4)) in rows.iter().enumerate() {
        s.push_str(&format!("{},{},{},{}\n", n + 1, fsc + i, ssc, cd4 + i % 2));
    }
    s
}

/// Three raw files, combined into one table, gated, then plotted.
pub struct Fixture {
    pub code: TempDir,
    pub raw: Vec<ArtifactId>,
    pub combined: ArtifactId,
    pub stats: ArtifactId,
    pub figure: ArtifactId,
    pub records: Vec<ProcessRecord>,
}

impl Fixture {
    pub fn steps(&self) -> &[ProcessRecord] {
        &self.records
    }
}

pub fn spec(code: &Path, kind: &str, inputs: &[(ArtifactId, &str)], outputs: &[&str], command: &[&str]) -> StepSpec {
    StepSpec {
        command: command.iter().map(|s| s.to_string()).collect(),
        declared_inputs: inputs.iter().map(|(i, n)| (i.clone(), n.to_string())).collect(),
        declared_outputs: outputs.iter().map(|s| s.to_string()).collect(),
        transformation_type: kind.into(),
        config: BTreeMap::new(),
        nondeterministic: false,
        dependency_manifest: Some(code.join("deps.txt")),
        agent: "analyst".into(),
        code_dir: code.to_path_buf(),
        timeout: Some(Duration::from_secs(30)),
    }
}

pub fn build_fixture(repo: &Repository) -> Fixture {
    let code = tempfile::tempdir().unwrap();
    let c = code.path();
    write_script(c, "combine.sh", COMBINE);
    write_script(c, "gate.sh", GATE);
    write_script(c, "plot.sh", PLOT);
    fs::write(c.join("deps.txt"), MANIFEST).unwrap();
    let mut raw = Vec::new();
    for i in 0..3 {
        let p = c.join(format!("raw_{i}.csv"));
        fs::write(&p, raw_csv(i)).unwrap();
        let mut desc = ArtifactDescription::for_file_name("raw.csv");
        desc.data_format = "FCS".into();
        desc.modality = "flow-cytometry".into();
        let subject = SubjectMetadata {
            subject_id: format!("S{i}"),
            cohort: if i == 2 { "case" } else { "control" }.into(),
            demographics: [("age".to_string(), format!("{}", 40 + i))].into(),
            collection: [("site".to_string(), "lab-a".to_string())].into(),
        };
        raw.push(repo.ingest_raw(&p, desc, vec![subject], "analyst").unwrap());
    }
    let names = ["raw_0.csv", "raw_1.csv", "raw_2.csv"];
    let inputs: Vec<(ArtifactId, &str)> = raw.iter().cloned().zip(names).collect();
    let combine = repo
        .run_step(&spec(
            c,
            "qc-combine",
            &inputs,
            &["combined.csv"],
            &[
                "sh",
                "combine.sh",
                "combined.csv",
                "raw_0.csv",
                "raw_1.csv",
                "raw_2.csv",
            ],
        ))
        .unwrap();
    let combined = combine.body.outputs[0].clone();
    let mut gate_spec = spec(
        c,
        "gating-stats",
        &[(combined.clone(), "combined.csv")],
        &["stats.csv"],
        &["sh", "gate.sh", "combined.csv", "stats.csv"],
    );
    gate_spec.config.insert("threshold".into(), "4".into());
    let gate = repo.run_step(&gate_spec).unwrap();
    let stats = gate.body.outputs[0].clone();
    let plot = repo
        .run_step(&spec(
            c,
            "visualization",
            &[(stats.clone(), "stats.csv")],
            &["figure.txt"],
            &["sh", "plot.sh", "stats.csv", "figure.txt"],
        ))
        .unwrap();
    let figure = plot.body.outputs[0].clone();
    Fixture {
        code,
        raw,
        combined,
        stats,
        figure,
        records: vec![combine, gate, plot],
    }
}

pub fn environment() -> EnvironmentDescriptor {
    EnvironmentDescriptor {
        os_name: "linux".into(),
        os_version: "6.1".into(),
        architecture: "x86_64".into(),
        hardware: BTreeMap::new(),
        tool_versions: BTreeMap::new(),
    }
}

pub fn timestamp() -> Timestamp {
    "2024-03-01T12:00:00Z".parse().unwrap()
}

/// A sealed synthetic record. `code` and `component` must resolve when the
/// record is appended to a repository.
pub fn synthetic(
    kind: &str,
    inputs: &[ArtifactId],
    outputs: &[ArtifactId],
    code: &ArtifactId,
    component: &ArtifactId,
) -> ProcessRecord {
    let details = (kind != INGESTION).then(|| ExecutionDetails {
        code_ref: code.clone(),
        config: StepConfig::default(),
        dependencies: vec![DependencySpec {
            name: "tool".into(),
            version: "1.0".into(),
        }],
        environment: environment(),
        data_dependencies: inputs.to_vec(),
        additional_components: vec![component.clone()],
    });
    ProcessBody {
        transformation_type: kind.into(),
        inputs: inputs.to_vec(),
        input_names: vec![],
        outputs: outputs.to_vec(),
        output_names: vec![],
        details,
        agent: "synthetic".into(),
        started_at: timestamp(),
        finished_at: timestamp(),
        exit_status: 0,
        nondeterministic: false,
        streams: None,
    }
    .seal()
    .unwrap()
}

/// Shape of a random DAG: `raw` ingested artifacts followed by steps, each
/// reading a subset of earlier artifacts (bitmask over indices) and
/// producing `outputs` new ones.
#[derive(Debug, Clone)]
pub struct DagShape {
    pub raw: usize,
    pub steps: Vec<(u64, usize)>,
}

impl DagShape {
    /// Trims steps so that artifacts + processes stays within `max_nodes`.
    pub fn bounded(mut self, max_nodes: usize) -> Self {
        loop {
            let artifacts = self.raw + self.steps.iter().map(|s| s.1).sum::<usize>();
            let processes = self.raw + self.steps.len();
            if artifacts + processes <= max_nodes || self.steps.is_empty() {
                return self;
            }
            self.steps.pop();
        }
    }
}

pub fn dag_strategy(max_nodes: usize) -> impl proptest::strategy::Strategy<Value = DagShape> {
    use proptest::prelude::*;
    (1usize..=4, prop::collection::vec((any::<u64>(), 1usize..=2), 0..10))
        .prop_map(move |(raw, steps)| DagShape { raw, steps }.bounded(max_nodes))
}

/// Materialized DAG: artifact payloads and records in creation order.
pub struct Dag {
    pub artifacts: Vec<(ArtifactId, Vec<u8>)>,
    pub records: Vec<ProcessRecord>,
    pub code: (ArtifactId, Vec<u8>),
    pub component: (ArtifactId, Vec<u8>),
}

pub fn realize(shape: &DagShape, salt: u64) -> Dag {
    let code = format!("code-{salt}").into_bytes();
    let component = format!("component-{salt}").into_bytes();
    let code_id = ArtifactId::of_bytes(&code);
    let comp_id = ArtifactId::of_bytes(&component);
    let mut artifacts: Vec<(ArtifactId, Vec<u8>)> = Vec::new();
    let mut records = Vec::new();
    let fresh = |artifacts: &mut Vec<(ArtifactId, Vec<u8>)>| {
        let bytes = format!("artifact-{salt}-{}", artifacts.len()).into_bytes();
        let id = ArtifactId::of_bytes(&bytes);
        artifacts.push((id.clone(), bytes));
        id
    };
    for _ in 0..shape.raw {
        let id = fresh(&mut artifacts);
        records.push(synthetic(INGESTION, &[], &[id], &code_id, &comp_id));
    }
    for (i, (mask, outs)) in shape.steps.iter().enumerate() {
        let n = artifacts.len();
        let mut inputs: Vec<ArtifactId> = (0..n)
            .filter(|j| mask >> (j % 64) & 1 == 1)
            .map(|j| artifacts[j].0.clone())
            .collect();
        if inputs.is_empty() {
            inputs.push(artifacts[(*mask as usize) % n].0.clone());
        }
        let outputs: Vec<ArtifactId> = (0..*outs).map(|_| fresh(&mut artifacts)).collect();
        records.push(synthetic(&format!("step-{i}"), &inputs, &outputs, &code_id, &comp_id));
    }
    Dag {
        artifacts,
        records,
        code: (code_id, code),
        component: (comp_id, component),
    }
}

/// Stores every payload, then appends `records` in the given order.
pub fn load_into(repo: &Repository, dag: &Dag, records: &[ProcessRecord]) {
    for (id, bytes) in dag.artifacts.iter().chain([&dag.code, &dag.component]) {
        let got = repo
            .store()
            .put_artifact(bytes, ArtifactDescription::for_file_name("x.dat"), vec![])
            .unwrap();
        assert_eq!(&got, id);
    }
    repo.ledger()
        .append(records.to_vec(), &|id, _| repo.store().resolves(id))
        .unwrap();
}
