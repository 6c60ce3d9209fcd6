//! The capture runner: executes analysis steps on the analyst's behalf and
//! records everything needed to describe and re-run them.
//!
//! A step runs in `staging/<attempt>/work/`, which holds only the declared
//! inputs (materialized by digest) and the script files named on its command
//! line. Nothing reaches the ledger or the store unless the step exits 0 and
//! produces every declared output; on failure the staging directory is left
//! in place for inspection.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::codebundle::CodeBundle;
use crate::digest::ArtifactId;
use crate::error::{Error, IoContext, Result};
use crate::exec::{self, Invocation};
use crate::fsutil::{random_hex, safe_relative};
use crate::graph::{
    DependencySpec, EnvironmentDescriptor, ExecutionDetails, ProcessBody, ProcessRecord, StepConfig, StreamRefs,
    INGESTION,
};
use crate::ledger::check_record;
use crate::repo::Repository;
use crate::store::{ArtifactDescription, SubjectMetadata, VerifyResult};
use crate::time::Timestamp;

/// Declaration of one analysis step.
#[derive(Debug, Clone, Default)]
pub struct StepSpec {
    pub command: Vec<String>,
    /// Stored artifact and the file name it is staged under.
    pub declared_inputs: Vec<(ArtifactId, String)>,
    pub declared_outputs: Vec<String>,
    pub transformation_type: String,
    pub config: BTreeMap<String, String>,
    pub nondeterministic: bool,
    pub dependency_manifest: Option<PathBuf>,
    pub agent: String,
    /// Where script files named on the command line are looked up.
    pub code_dir: PathBuf,
    /// Overrides the repository's step timeout.
    pub timeout: Option<Duration>,
}

impl StepSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(m.to_owned()));
        if self.command.is_empty() {
            return fail("command must not be empty");
        }
        if self.declared_outputs.is_empty() {
            return fail("at least one output must be declared");
        }
        if self.declared_inputs.is_empty() {
            return fail("at least one input must be declared; raw files enter through ingestion");
        }
        if self.transformation_type.trim().is_empty() || self.transformation_type == INGESTION {
            return fail("transformation type must be set and must not be `ingestion`");
        }
        let mut names = BTreeSet::new();
        for name in self
            .declared_inputs
            .iter()
            .map(|(_, n)| n)
            .chain(self.declared_outputs.iter())
        {
            let Some(rel) = safe_relative(name) else {
                return Err(Error::Validation(format!("unsafe staging name {name:?}")));
            };
            if !names.insert(rel) {
                return Err(Error::Validation(format!("duplicate staging name {name:?}")));
            }
        }
        Ok(())
    }
}

/// Parses `name=version` lines; blank lines and `#` comments are ignored.
pub fn parse_manifest(text: &str) -> Result<Vec<DependencySpec>> {
    let mut deps = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, version) = line
            .split_once('=')
            .map(|(a, b)| (a.trim(), b.trim()))
            .filter(|(a, b)| !a.is_empty() && !b.is_empty())
            .ok_or_else(|| Error::Validation(format!("manifest line {}: expected name=version", n + 1)))?;
        deps.push(DependencySpec {
            name: name.to_owned(),
            version: version.to_owned(),
        });
    }
    deps.sort();
    deps.dedup();
    Ok(deps)
}

fn first_line(bytes: &[u8]) -> Option<String> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(str::to_owned)
}

fn probe_tool(command: &[String]) -> String {
    if command.is_empty() {
        return "unknown".to_owned();
    }
    let Ok(dir) = tempfile_dir() else {
        return "unknown".to_owned();
    };
    let result = exec::run(Invocation {
        command,
        workdir: &dir,
        env: exec::step_environment(&dir, &BTreeMap::new()),
        timeout: Duration::from_secs(10),
        stdout_path: &dir.join("stdout"),
        stderr_path: &dir.join("stderr"),
    });
    let _ = fs::remove_dir_all(&dir);
    match result {
        Ok(o) if o.success() => first_line(&o.stdout)
            .or_else(|| first_line(&o.stderr))
            .unwrap_or_else(|| "unknown".to_owned()),
        _ => "unknown".to_owned(),
    }
}

fn tempfile_dir() -> std::io::Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("certpro-probe-{}", random_hex(8)));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn read_trimmed(path: &str) -> Option<String> {
    fs::read_to_string(path)
        .ok()
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
}

fn os_release_field(key: &str) -> Option<String> {
    let text = fs::read_to_string("/etc/os-release").ok()?;
    text.lines().find_map(|l| {
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .map(|v| v.trim_matches('"').to_owned())
    })
}

fn proc_field(path: &str, key: &str) -> Option<String> {
    let text = fs::read_to_string(path).ok()?;
    text.lines().find_map(|l| {
        let (k, v) = l.split_once(':')?;
        (k.trim() == key).then(|| v.trim().to_owned())
    })
}

/// Describes the host: OS, architecture, stable hardware facts, and the
/// version line reported by each configured tool probe. Anything that cannot
/// be determined is recorded as `unknown`.
pub fn snapshot_environment(probes: &BTreeMap<String, Vec<String>>) -> EnvironmentDescriptor {
    let unknown = || "unknown".to_owned();
    let os_version = match (
        os_release_field("PRETTY_NAME"),
        read_trimmed("/proc/sys/kernel/osrelease"),
    ) {
        (Some(d), Some(k)) => format!("{d}; kernel {k}"),
        (Some(d), None) => d,
        (None, Some(k)) => format!("kernel {k}"),
        (None, None) => unknown(),
    };
    let mut hardware = BTreeMap::new();
    hardware.insert(
        "cpu_model".to_owned(),
        proc_field("/proc/cpuinfo", "model name").unwrap_or_else(unknown),
    );
    hardware.insert(
        "cpu_count".to_owned(),
        std::thread::available_parallelism()
            .map(|n| n.to_string())
            .unwrap_or_else(|_| unknown()),
    );
    hardware.insert(
        "memory_bytes".to_owned(),
        proc_field("/proc/meminfo", "MemTotal")
            .and_then(|v| v.trim_end_matches("kB").trim().parse::<u64>().ok())
            .map(|kb| (kb * 1024).to_string())
            .unwrap_or_else(unknown),
    );
    let tool_versions = probes
        .iter()
        .map(|(tool, cmd)| (tool.clone(), probe_tool(cmd)))
        .collect();
    let non_empty = |s: &str| if s.is_empty() { unknown() } else { s.to_owned() };
    EnvironmentDescriptor {
        os_name: non_empty(std::env::consts::OS),
        os_version,
        architecture: non_empty(std::env::consts::ARCH),
        hardware,
        tool_versions,
    }
}

impl Repository {
    /// Brings an external file under provenance control.
    pub fn ingest_raw(
        &self,
        path: &Path,
        description: ArtifactDescription,
        subjects: Vec<SubjectMetadata>,
        agent: &str,
    ) -> Result<ArtifactId> {
        let started_at = Timestamp::now();
        let bytes = fs::read(path).at(path)?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut description = description;
        if description.file_type.is_empty() {
            description.file_type = crate::fsutil::extension_tag(&name);
        }
        let id = self.store().put_artifact(&bytes, description, subjects)?;
        let record = ProcessBody {
            transformation_type: INGESTION.to_owned(),
            inputs: vec![],
            input_names: vec![],
            outputs: vec![id.clone()],
            output_names: vec![name],
            details: None,
            agent: agent.to_owned(),
            started_at,
            finished_at: Timestamp::now(),
            exit_status: 0,
            nondeterministic: false,
            streams: None,
        }
        .seal()?;
        self.record_process(record)?;
        Ok(id)
    }

    pub fn snapshot_environment(&self) -> EnvironmentDescriptor {
        snapshot_environment(&self.config().tool_probes)
    }

    /// Runs one step hermetically and appends its record.
    pub fn run_step(&self, spec: &StepSpec) -> Result<ProcessRecord> {
        spec.validate()?;
        for (id, name) in &spec.declared_inputs {
            match self.store().verify_artifact(id) {
                VerifyResult::Ok => {}
                VerifyResult::Missing => {
                    return Err(Error::MissingInput(format!("{id} (staged as {name})")));
                }
                VerifyResult::Corrupt => {
                    return Err(Error::Integrity(format!("input {id} fails its digest check")));
                }
            }
        }
        let dependencies = match &spec.dependency_manifest {
            Some(p) => {
                let text = fs::read_to_string(p).at(p)?;
                Some((parse_manifest(&text)?, text))
            }
            None => None,
        };
        let input_names: Vec<&str> = spec.declared_inputs.iter().map(|(_, n)| n.as_str()).collect();
        let code = CodeBundle::capture(&spec.command, &spec.code_dir, &input_names)?;

        let attempt = self.root().join("staging").join(format!(
            "{}-{}",
            Timestamp::now().as_datetime().format("%Y%m%dT%H%M%S"),
            random_hex(6)
        ));
        let work = attempt.join("work");
        fs::create_dir_all(&work).at(&work)?;
        for (id, name) in &spec.declared_inputs {
            let dest = work.join(safe_relative(name).expect("validated"));
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent).at(parent)?;
            }
            self.store().export_object(id, &dest)?;
        }
        code.materialize(&work)?;

        let environment = self.snapshot_environment();
        let started_at = Timestamp::now();
        let outcome = exec::run(Invocation {
            command: &spec.command,
            workdir: &work,
            env: exec::step_environment(&work, &spec.config),
            timeout: spec
                .timeout
                .unwrap_or(Duration::from_secs(self.config().step_timeout_seconds)),
            stdout_path: &attempt.join("stdout"),
            stderr_path: &attempt.join("stderr"),
        })
        .map_err(|e| Error::StepFailed {
            reason: format!("could not launch: {e}"),
            exit_status: None,
            stdout: vec![],
            stderr: vec![],
            staging: attempt.clone(),
        })?;
        let finished_at = Timestamp::now();
        if !outcome.success() {
            return Err(Error::StepFailed {
                reason: outcome.describe(),
                exit_status: outcome.exit_code,
                stdout: outcome.stdout,
                stderr: outcome.stderr,
                staging: attempt,
            });
        }

        let mut produced = Vec::with_capacity(spec.declared_outputs.len());
        for name in &spec.declared_outputs {
            let path = work.join(safe_relative(name).expect("validated"));
            if !path.is_file() {
                return Err(Error::MissingOutput {
                    name: name.clone(),
                    staging: attempt,
                });
            }
            produced.push((name, fs::read(&path).at(&path)?));
        }

        // Everything the record will reference, in the order it is stored.
        let code_bytes = code.to_bytes()?;
        let code_ref = ArtifactId::of_bytes(&code_bytes);
        let mut components = Vec::new();
        let component_files: Vec<(String, Vec<u8>)> = code
            .files
            .iter()
            .map(|f| Ok((f.path.clone(), f.bytes()?)))
            .collect::<Result<_>>()?;
        for (_, bytes) in &component_files {
            components.push(ArtifactId::of_bytes(bytes));
        }
        if let Some((_, text)) = &dependencies {
            components.push(ArtifactId::of_bytes(text.as_bytes()));
        }
        components.sort();
        components.dedup();
        let mut data_dependencies: Vec<ArtifactId> = spec.declared_inputs.iter().map(|(id, _)| id.clone()).collect();
        data_dependencies.sort();
        data_dependencies.dedup();

        let body = ProcessBody {
            transformation_type: spec.transformation_type.clone(),
            inputs: spec.declared_inputs.iter().map(|(id, _)| id.clone()).collect(),
            input_names: spec.declared_inputs.iter().map(|(_, n)| n.clone()).collect(),
            outputs: produced.iter().map(|(_, b)| ArtifactId::of_bytes(b)).collect(),
            output_names: spec.declared_outputs.clone(),
            details: Some(ExecutionDetails {
                code_ref: code_ref.clone(),
                config: StepConfig {
                    values: spec.config.clone(),
                    file: None,
                },
                dependencies: dependencies.as_ref().map(|(d, _)| d.clone()).unwrap_or_default(),
                environment,
                data_dependencies,
                additional_components: components,
            }),
            agent: spec.agent.clone(),
            started_at,
            finished_at,
            exit_status: 0,
            nondeterministic: spec.nondeterministic,
            streams: Some(StreamRefs {
                stdout: ArtifactId::of_bytes(&outcome.stdout),
                stderr: ArtifactId::of_bytes(&outcome.stderr),
            }),
        };
        let record = body.seal()?;

        // Check against the ledger before storing anything, treating the
        // objects about to be stored as present. The append re-checks under
        // the lock.
        let pending: BTreeSet<&ArtifactId> = record.body.referenced();
        let snap = self.snapshot()?;
        if snap.get(&record.process_id).is_none() {
            check_record(&snap, &record, &|id, role| {
                pending.contains(id) || self.resolves(id, role)
            })?;
        }

        let store = self.store();
        for (name, bytes) in &produced {
            store.put_artifact(bytes, ArtifactDescription::for_file_name(name), vec![])?;
        }
        store.put_artifact(
            &code_bytes,
            ArtifactDescription::for_file_name("code.json").with_label("role", "code"),
            vec![],
        )?;
        for (path, bytes) in &component_files {
            store.put_artifact(
                bytes,
                ArtifactDescription::for_file_name(path)
                    .with_label("role", "component")
                    .with_label("path", path),
                vec![],
            )?;
        }
        if let Some((_, text)) = &dependencies {
            store.put_artifact(
                text.as_bytes(),
                ArtifactDescription::for_file_name("manifest.txt").with_label("role", "dependency-manifest"),
                vec![],
            )?;
        }
        for (stream, bytes) in [("stdout", &outcome.stdout), ("stderr", &outcome.stderr)] {
            store.put_artifact(
                bytes,
                ArtifactDescription::for_file_name("log.txt").with_label("stream", stream),
                vec![],
            )?;
        }
        self.record_process(record.clone())?;
        let _ = fs::remove_dir_all(&attempt);
        Ok(record)
    }
}
