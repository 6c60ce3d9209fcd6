//! Self-contained trace documents, object bundles, and DOT/HTML rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_vec;
use crate::certification::{Certificate, Severity};
use crate::digest::{sha256_hex, ArtifactId};
use crate::error::{Error, IoContext, Result};
use crate::graph::{topological_order, ProcessRecord, TraceGraph};
use crate::ledger::RefRole;
use crate::repo::Repository;
use crate::store::{Artifact, ArtifactStore};

pub const FORMAT_VERSION: &str = "1";

/// Canonical, self-contained description of a trace. Every id referenced
/// anywhere is either defined in `artifacts` or listed in `missing`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceDocument {
    pub format_version: String,
    pub artifacts: Vec<Artifact>,
    pub processes: Vec<ProcessRecord>,
    pub roots: Vec<ArtifactId>,
    pub missing: Vec<ArtifactId>,
}

impl TraceDocument {
    pub fn from_graph(graph: &TraceGraph) -> Self {
        TraceDocument {
            format_version: FORMAT_VERSION.to_owned(),
            artifacts: graph.artifacts.values().cloned().collect(),
            processes: graph.processes.values().cloned().collect(),
            roots: graph
                .roots
                .iter()
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            missing: graph.undefined_ids().into_iter().collect(),
        }
    }

    /// Same content with every node list sorted and deduplicated.
    fn normalized(&self) -> Self {
        let mut doc = self.clone();
        doc.artifacts.sort_by(|a, b| a.id.cmp(&b.id));
        doc.artifacts.dedup_by(|a, b| a.id == b.id);
        doc.processes.sort_by(|a, b| a.process_id.cmp(&b.process_id));
        doc.processes.dedup_by(|a, b| a.process_id == b.process_id);
        for list in [&mut doc.roots, &mut doc.missing] {
            list.sort();
            list.dedup();
        }
        doc
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        to_canonical_vec(self)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// Parses and checks schema, canonical form, and self-containment.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let doc: TraceDocument = serde_json::from_slice(bytes).map_err(|e| Error::Schema(e.to_string()))?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported format_version {:?}",
                doc.format_version
            )));
        }
        let canonical = doc.normalized().to_bytes()?;
        if canonical != bytes {
            let at = canonical
                .iter()
                .zip(bytes)
                .position(|(a, b)| a != b)
                .unwrap_or(canonical.len().min(bytes.len()));
            return Err(Error::CanonicalForm(format!(
                "bytes diverge from canonical form at offset {at}"
            )));
        }
        let defined: BTreeSet<&ArtifactId> = doc.artifacts.iter().map(|a| &a.id).collect();
        let missing: BTreeSet<&ArtifactId> = doc.missing.iter().collect();
        if let Some(id) = defined.intersection(&missing).next() {
            return Err(Error::Schema(format!("artifact {id} is both defined and missing")));
        }
        for p in &doc.processes {
            for id in p.body.referenced() {
                if !defined.contains(id) && !missing.contains(id) {
                    return Err(Error::Schema(format!(
                        "process {} references undefined artifact {id}",
                        p.process_id
                    )));
                }
            }
        }
        if let Some(id) = doc
            .roots
            .iter()
            .find(|id| !defined.contains(id) && !missing.contains(id))
        {
            return Err(Error::Schema(format!("root {id} is not defined")));
        }
        for a in &doc.artifacts {
            if a.meta.storage_ref != ArtifactStore::storage_ref(&a.id) {
                return Err(Error::Schema(format!("artifact {} has a foreign storage_ref", a.id)));
            }
        }
        Ok(doc)
    }

    pub fn to_graph(&self) -> TraceGraph {
        TraceGraph {
            roots: self.roots.clone(),
            artifacts: self.artifacts.iter().map(|a| (a.id.clone(), a.clone())).collect(),
            processes: self
                .processes
                .iter()
                .map(|p| (p.process_id.clone(), p.clone()))
                .collect(),
            missing_objects: BTreeSet::new(),
        }
    }
}

impl Repository {
    /// Canonical document for the ancestry of `roots`; with `bundle`, also
    /// copies every defined artifact's bytes to `bundle/<digest>`.
    pub fn export_trace(&self, roots: &[ArtifactId], bundle: Option<&Path>) -> Result<TraceDocument> {
        let graph = self.trace_ancestry(roots)?;
        let doc = TraceDocument::from_graph(&graph);
        if let Some(dir) = bundle {
            if let Some(id) = graph.missing_objects.iter().next() {
                return Err(Error::Storage(format!("object {id} is missing from the store")));
            }
            fs::create_dir_all(dir).at(dir)?;
            for a in &doc.artifacts {
                self.store()
                    .export_object(&a.id, &dir.join(a.id.as_str()))
                    .map_err(|e| Error::Storage(format!("cannot bundle {}: {e}", a.id)))?;
            }
        }
        Ok(doc)
    }

    /// Imports a canonical trace document, storing any bundled objects and
    /// appending its process records. Nothing is written unless every check
    /// passes.
    pub fn import_trace(&self, bytes: &[u8], bundle: Option<&Path>) -> Result<TraceGraph> {
        let doc = TraceDocument::parse(bytes)?;
        for p in &doc.processes {
            if p.computed_id()? != p.process_id {
                return Err(Error::Integrity(format!(
                    "process {} does not match its body",
                    p.process_id
                )));
            }
            p.body.check_fields()?;
        }
        topological_order(doc.processes.iter())?;

        let mut objects: BTreeMap<&ArtifactId, Vec<u8>> = BTreeMap::new();
        if let Some(dir) = bundle {
            for a in &doc.artifacts {
                let path = dir.join(a.id.as_str());
                let bytes = match fs::read(&path) {
                    Ok(b) => b,
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                    Err(e) => return Err(Error::io(path, e)),
                };
                if ArtifactId::of_bytes(&bytes) != a.id {
                    return Err(Error::Integrity(format!(
                        "bundle object {} does not match its digest",
                        a.id
                    )));
                }
                if bytes.len() as u64 != a.meta.byte_size {
                    return Err(Error::Integrity(format!("bundle object {} has the wrong size", a.id)));
                }
                objects.insert(&a.id, bytes);
            }
        }

        let defined: BTreeSet<&ArtifactId> = doc.artifacts.iter().map(|a| &a.id).collect();
        let resolves = |id: &ArtifactId, role: RefRole| defined.contains(id) || self.resolves(id, role);
        self.ledger().precheck(&doc.processes, &resolves)?;
        for a in &doc.artifacts {
            self.store().check_merge(a)?;
        }

        for (id, bytes) in &objects {
            self.store().write_object(id, bytes)?;
        }
        for a in &doc.artifacts {
            self.store().record_artifact(a)?;
        }
        self.ledger().append(doc.processes.clone(), &resolves)?;
        self.trace_ancestry(&doc.roots)
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering: artifacts as boxes, processes as ellipses, edges
/// input -> process -> output.
pub fn render_dot(graph: &TraceGraph) -> String {
    let mut out = String::from("digraph trace {\n  rankdir=LR;\n");
    for id in graph.data_artifacts() {
        let format = graph
            .artifacts
            .get(&id)
            .map(|a| a.meta.data_format.as_str())
            .filter(|f| !f.is_empty())
            .unwrap_or("?");
        let _ = writeln!(
            out,
            "  \"a:{id}\" [shape=box,label=\"{}\\n{}\"];",
            id.short(12),
            dot_escape(format)
        );
    }
    for (pid, p) in &graph.processes {
        let _ = writeln!(
            out,
            "  \"p:{pid}\" [shape=ellipse,label=\"{}\"];",
            dot_escape(&p.body.transformation_type)
        );
    }
    for (pid, p) in &graph.processes {
        for i in &p.body.inputs {
            let _ = writeln!(out, "  \"a:{i}\" -> \"p:{pid}\";");
        }
        for o in &p.body.outputs {
            let _ = writeln!(out, "  \"p:{pid}\" -> \"a:{o}\";");
        }
    }
    out.push_str("}\n");
    out
}

fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

const REPORT_STYLE: &str = "body{font-family:sans-serif;margin:2em;max-width:70em}\
table{border-collapse:collapse}td,th{border:1px solid #999;padding:.2em .5em;text-align:left}\
.badge{display:inline-block;padding:.3em .8em;border-radius:.4em;color:#fff;font-weight:bold}\
.FULL{background:#2a7d2e}.PARTIAL{background:#b8860b}.FRAGMENT{background:#a33}\
pre{background:#f4f4f4;padding:1em;overflow:auto}code{font-size:90%}";

/// Offline HTML page for a certificate and its trace.
pub fn render_report(cert: &Certificate, graph: &TraceGraph) -> Result<String> {
    let known = graph.data_artifacts();
    for r in &cert.roots {
        if !known.contains(r) && !graph.artifacts.contains_key(r) {
            return Err(Error::NotFound(format!("root {r} is not in the trace")));
        }
    }
    let doi = cert.doi.to_string();
    let badge = cert.badge.as_str();
    let mut h = String::new();
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\
         <title>Certificate of Reproducibility {doi}</title><style>{REPORT_STYLE}</style></head><body>\n"
    );
    let _ = writeln!(h, "<h1>Certificate of Reproducibility</h1>");
    let _ = writeln!(h, "<p><span class=\"badge {badge}\">{badge}</span></p>");
    let _ = writeln!(h, "<table>");
    for (k, v) in [
        ("Identifier", doi.clone()),
        ("Issued", cert.issued_at.to_string()),
        ("Issuer", cert.issuer.clone()),
        ("Assessed", cert.report.assessed_at.to_string()),
        ("Trace digest", cert.trace_digest.clone()),
    ] {
        let _ = writeln!(h, "<tr><th>{k}</th><td><code>{}</code></td></tr>", html_escape(&v));
    }
    let roots: Vec<String> = cert.roots.iter().map(|r| r.to_string()).collect();
    let _ = writeln!(
        h,
        "<tr><th>Roots</th><td><code>{}</code></td></tr>\n</table>",
        roots.join("<br>")
    );

    let _ = writeln!(h, "<h2>Findings</h2>");
    if cert.report.findings.is_empty() {
        let _ = writeln!(h, "<p>No findings.</p>");
    } else {
        let _ = writeln!(
            h,
            "<table class=\"findings\"><tr><th>Severity</th><th>Node</th><th>Rule</th><th>Message</th></tr>"
        );
        for f in &cert.report.findings {
            let sev = match f.severity {
                Severity::Warning => "warning",
                Severity::Error => "error",
            };
            let _ = writeln!(
                h,
                "<tr><td>{sev}</td><td><code>{}</code></td><td>{}</td><td>{}</td></tr>",
                html_escape(&f.node),
                html_escape(&f.rule),
                html_escape(&f.message)
            );
        }
        let _ = writeln!(h, "</table>");
    }

    let _ = writeln!(
        h,
        "<h2>Trace</h2>\n<table><tr><th>Process</th><th>Type</th><th>Inputs</th><th>Outputs</th></tr>"
    );
    let order = graph
        .topological_order()
        .unwrap_or_else(|_| graph.processes.values().collect());
    for p in order {
        let list = |ids: &[ArtifactId]| {
            ids.iter()
                .map(|i| format!("<code>{}</code>", i.short(12)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(
            h,
            "<tr><td><code>{}</code></td><td>{}</td><td>{}</td><td>{}</td></tr>",
            p.process_id.short(12),
            html_escape(&p.body.transformation_type),
            list(&p.body.inputs),
            list(&p.body.outputs)
        );
    }
    let _ = writeln!(
        h,
        "</table>\n<h3>Graph (DOT)</h3>\n<pre>{}</pre>",
        html_escape(&render_dot(graph))
    );
    h.push_str("</body></html>\n");
    Ok(h)
}
