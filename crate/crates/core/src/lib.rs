//! Local-first provenance ledger and reproducibility certification.
//!
//! A [`Repository`] holds content-addressed artifacts, an append-only ledger
//! of process records linking them, and a registrar of minted identifiers
//! and issued certificates.

pub mod canonical;
pub mod certification;
pub mod codebundle;
pub mod digest;
pub mod error;
pub mod exec;
pub mod fsutil;
pub mod graph;
pub mod interchange;
pub mod ledger;
pub mod replay;
pub mod repo;
pub mod runner;
pub mod store;
pub mod time;

pub use certification::{
    grade, BadgeLevel, Certificate, CompletenessReport, Doi, Finding, Registrar, RemoteRegistrar, Severity,
    VerifyOutcome,
};
pub use digest::{sha256_hex, ArtifactId, ProcessId};
pub use error::{Error, Result};
pub use graph::{
    validate_graph, DependencySpec, EnvironmentDescriptor, ExecutionDetails, ProcessBody, ProcessRecord, StepConfig,
    TraceGraph, ValidationReport, Violation, ViolationKind, INGESTION,
};
pub use interchange::{render_dot, render_report, TraceDocument, FORMAT_VERSION};
pub use replay::{EnvironmentCheck, OutputComparison, ReplayPolicy, ReplayResult, ReplayStatus};
pub use repo::{RepoConfig, Repository};
pub use runner::{parse_manifest, StepSpec};
pub use store::{Artifact, ArtifactDescription, ArtifactMeta, SubjectMetadata, VerifyResult};
pub use time::Timestamp;
