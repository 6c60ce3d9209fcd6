use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use certpro_core::{
    render_dot, render_report, ArtifactDescription, ArtifactId, BadgeLevel, Doi, EnvironmentCheck, Error, ProcessId,
    ReplayPolicy, ReplayResult, ReplayStatus, Repository, StepSpec, SubjectMetadata, TraceDocument, VerifyOutcome,
    VerifyResult,
};

#[derive(Parser)]
#[command(
    name = "certpro",
    version,
    about = "Provenance ledger and reproducibility certification"
)]
struct Cli {
    /// Structured JSON on stdout
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a repository at $CERTPRO_ROOT or ./.certpro
    Init,
    /// Bring a raw file under provenance control
    Ingest(IngestArgs),
    /// Execute a step hermetically and record it
    Run(RunArgs),
    /// Show the ancestry of artifacts
    Trace {
        #[arg(required = true)]
        roots: Vec<ArtifactId>,
        /// Emit Graphviz DOT
        #[arg(long)]
        dot: bool,
    },
    /// Grade a trace without issuing a certificate
    Assess {
        #[arg(required = true)]
        roots: Vec<ArtifactId>,
    },
    /// Grade a trace, mint an identifier and issue a certificate
    Certify {
        #[arg(required = true)]
        roots: Vec<ArtifactId>,
        /// Identifier prefix, e.g. 10.57785
        #[arg(long)]
        prefix: Option<String>,
        #[arg(long)]
        issuer: Option<String>,
    },
    /// Re-check a certificate against the current repository
    VerifyCert { doi: Doi },
    /// Check stored objects against their digests (all objects if none given)
    Verify { ids: Vec<ArtifactId> },
    /// Re-execute recorded steps and compare outputs bit for bit
    Replay(ReplayArgs),
    /// Write the canonical trace document for artifacts
    Export {
        #[arg(required = true)]
        roots: Vec<ArtifactId>,
        /// Also copy every artifact's bytes into DIR
        #[arg(long, value_name = "DIR")]
        bundle: Option<PathBuf>,
        /// Write the document here instead of stdout
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Import a trace document, with optional object bundle
    Import {
        doc: PathBuf,
        #[arg(long, value_name = "DIR")]
        bundle: Option<PathBuf>,
    },
    /// Render a certificate as a self-contained HTML page
    Report {
        doi: Doi,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Show an artifact's metadata
    Stat { id: ArtifactId },
}

#[derive(Args)]
struct IngestArgs {
    path: PathBuf,
    /// Data format tag (default: upper-cased extension)
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    modality: Option<String>,
    /// Subject metadata as comma-separated key=value pairs; `id` and
    /// `cohort` are fields, `collection.<key>` goes to collection details,
    /// anything else is demographic
    #[arg(long, value_name = "K=V,...")]
    subject: Vec<String>,
    #[arg(long, value_name = "K=V", value_parser = parse_pair)]
    label: Vec<(String, String)>,
    #[arg(long)]
    agent: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Transformation type tag
    #[arg(long = "type", value_name = "T")]
    transformation_type: String,
    /// Input artifact staged under NAME
    #[arg(long = "in", value_name = "DIGEST=NAME", value_parser = parse_input)]
    inputs: Vec<(ArtifactId, String)>,
    /// Expected output file
    #[arg(long = "out", value_name = "NAME", required = true)]
    outputs: Vec<String>,
    /// Dependency manifest of name=version lines
    #[arg(long, value_name = "MANIFEST")]
    deps: Option<PathBuf>,
    #[arg(long)]
    nondeterministic: bool,
    /// Step configuration, exported to the command as CERTPRO_CONFIG_<KEY>
    #[arg(long = "config", value_name = "K=V", value_parser = parse_pair)]
    config: Vec<(String, String)>,
    #[arg(long)]
    agent: Option<String>,
    /// Seconds before the step is killed
    #[arg(long)]
    timeout: Option<u64>,
    #[arg(last = true, required = true)]
    command: Vec<String>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(required_unless_present = "roots", conflicts_with = "roots")]
    process: Option<ProcessId>,
    #[arg(long, num_args = 1.., value_name = "DIGEST")]
    roots: Vec<ArtifactId>,
    #[arg(long, default_value = "warn", value_parser = parse_env_check)]
    env: EnvironmentCheck,
    #[arg(long)]
    timeout: Option<u64>,
    /// Keep replay working directories
    #[arg(long)]
    keep: bool,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_owned(), v.to_owned())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

fn parse_input(s: &str) -> Result<(ArtifactId, String), String> {
    let (d, n) = parse_pair(s)?;
    let id = d.parse::<ArtifactId>().map_err(|e| e.to_string())?;
    if n.is_empty() {
        return Err(format!("empty staging name in {s:?}"));
    }
    Ok((id, n))
}

fn parse_env_check(s: &str) -> Result<EnvironmentCheck, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_subject(s: &str) -> Result<SubjectMetadata, Error> {
    let mut subject = SubjectMetadata {
        subject_id: String::new(),
        cohort: String::new(),
        demographics: BTreeMap::new(),
        collection: BTreeMap::new(),
    };
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = parse_pair(part).map_err(Error::Validation)?;
        match k.as_str() {
            "id" | "subject_id" => subject.subject_id = v,
            "cohort" => subject.cohort = v,
            _ => match k.strip_prefix("collection.") {
                Some(key) => {
                    subject.collection.insert(key.to_owned(), v);
                }
                None => {
                    subject.demographics.insert(k, v);
                }
            },
        }
    }
    Ok(subject)
}

fn default_agent() -> String {
    std::env::var("USER")
        .ok()
        .filter(|u| !u.is_empty())
        .unwrap_or_else(|| "unknown".to_owned())
}

/// Outcome of a command: what to print and whether it counts as success.
struct Output {
    text: String,
    json: Value,
    ok: bool,
}

impl Output {
    fn ok(text: impl Into<String>, json: Value) -> Self {
        Output {
            text: text.into(),
            json,
            ok: true,
        }
    }
}

fn to_value<T: serde::Serialize + ?Sized>(v: &T) -> Result<Value, Error> {
    Ok(serde_json::to_value(v)?)
}

fn open_repo() -> Result<Repository, Error> {
    Repository::open(&Repository::default_root())
}

fn execute(command: Command) -> Result<Output, Error> {
    match command {
        Command::Init => {
            let root = Repository::default_root();
            Repository::init(&root)?;
            Ok(Output::ok(
                format!("initialized repository at {}\n", root.display()),
                json!({ "root": root }),
            ))
        }
        Command::Ingest(args) => ingest(args),
        Command::Run(args) => run(args),
        Command::Trace { roots, dot } => {
            let repo = open_repo()?;
            let graph = repo.trace_ancestry(&roots)?;
            let json = to_value(&TraceDocument::from_graph(&graph))?;
            if dot {
                return Ok(Output::ok(render_dot(&graph), json));
            }
            let mut text = String::new();
            for p in graph.topological_order()? {
                let names = |ids: &[ArtifactId]| ids.iter().map(|i| i.short(12)).collect::<Vec<_>>().join(",");
                text.push_str(&format!(
                    "{} {} [{}] -> [{}]\n",
                    p.process_id,
                    p.body.transformation_type,
                    names(&p.body.inputs),
                    names(&p.body.outputs)
                ));
            }
            for id in &graph.missing_objects {
                text.push_str(&format!("missing object {id}\n"));
            }
            Ok(Output::ok(text, json))
        }
        Command::Assess { roots } => {
            let report = open_repo()?.assess_completeness(&roots)?;
            let mut text = format!("{}\n", report.badge.as_str());
            for f in &report.findings {
                text.push_str(&format!("{:?} {} {}: {}\n", f.severity, f.rule, f.node, f.message).to_lowercase());
            }
            Ok(Output::ok(text, to_value(&report)?))
        }
        Command::Certify { roots, prefix, issuer } => {
            let repo = open_repo()?;
            let report = repo.assess_completeness(&roots)?;
            for f in &report.findings {
                eprintln!("certpro: {:?}: {} {}: {}", f.severity, f.rule, f.node, f.message);
            }
            if report.badge == BadgeLevel::Fragment {
                return Err(Error::Uncertifiable(format!(
                    "trace grades FRAGMENT with {} finding(s)",
                    report.findings.len()
                )));
            }
            let prefix = prefix.unwrap_or_else(|| repo.config().doi_prefix.clone());
            let mut registrar = repo.registrar()?;
            let doi = registrar.mint_identifier(&prefix)?;
            let cert = registrar.issue_certificate(&report, &doi, &issuer.unwrap_or_else(default_agent))?;
            Ok(Output::ok(
                format!("{} {}\n", cert.doi, cert.badge.as_str()),
                to_value(&cert)?,
            ))
        }
        Command::VerifyCert { doi } => {
            let repo = open_repo()?;
            let cert = repo.registrar()?.load_certificate(&doi)?;
            let outcome = repo.verify_certificate(&cert)?;
            let name = to_value(&outcome)?;
            let name = name.as_str().unwrap_or_default().to_owned();
            Ok(Output {
                text: format!("{name}\n"),
                json: json!({ "doi": doi, "outcome": name }),
                ok: outcome == VerifyOutcome::Valid,
            })
        }
        Command::Verify { ids } => {
            let repo = open_repo()?;
            let ids = if ids.is_empty() {
                let mut all: Vec<ArtifactId> = repo.store().list_objects()?;
                all.extend(repo.full_graph()?.artifacts.into_keys());
                all.sort();
                all.dedup();
                all
            } else {
                ids
            };
            let mut text = String::new();
            let mut results = serde_json::Map::new();
            let mut ok = true;
            for id in ids {
                let status = repo.store().verify_artifact(&id);
                ok &= status == VerifyResult::Ok;
                let name = to_value(&status)?;
                text.push_str(&format!("{id} {}\n", name.as_str().unwrap_or_default()));
                results.insert(id.to_string(), name);
            }
            Ok(Output {
                text,
                json: Value::Object(results),
                ok,
            })
        }
        Command::Replay(args) => replay(args),
        Command::Export { roots, bundle, out } => {
            let repo = open_repo()?;
            let doc = repo.export_trace(&roots, bundle.as_deref())?;
            let bytes = doc.to_bytes()?;
            match out {
                Some(path) => {
                    fs::write(&path, &bytes).map_err(|e| Error::Storage(format!("{}: {e}", path.display())))?;
                    Ok(Output::ok(
                        format!("{}\n", path.display()),
                        json!({ "path": path, "digest": doc.digest()? }),
                    ))
                }
                None => {
                    // the document itself is the machine output, byte for byte
                    std::io::stdout()
                        .write_all(&bytes)
                        .map_err(|e| Error::Storage(format!("stdout: {e}")))?;
                    Ok(Output::ok(String::new(), Value::Null))
                }
            }
        }
        Command::Import { doc, bundle } => {
            let repo = open_repo()?;
            let bytes = fs::read(&doc).map_err(|e| Error::NotFound(format!("{}: {e}", doc.display())))?;
            let graph = repo.import_trace(&bytes, bundle.as_deref())?;
            Ok(Output::ok(
                format!(
                    "imported {} artifact(s), {} process(es)\n",
                    graph.artifacts.len(),
                    graph.processes.len()
                ),
                json!({
                    "artifacts": graph.artifacts.len(),
                    "processes": graph.processes.len(),
                    "missing_objects": graph.missing_objects,
                }),
            ))
        }
        Command::Report { doi, out } => {
            let repo = open_repo()?;
            let cert = repo.registrar()?.load_certificate(&doi)?;
            let graph = repo.trace_ancestry(&cert.roots)?;
            let html = render_report(&cert, &graph)?;
            fs::write(&out, html).map_err(|e| Error::Storage(format!("{}: {e}", out.display())))?;
            Ok(Output::ok(format!("{}\n", out.display()), json!({ "path": out })))
        }
        Command::Stat { id } => {
            let artifact = open_repo()?.store().stat_artifact(&id)?;
            let json = to_value(&artifact)?;
            Ok(Output::ok(format!("{}\n", serde_json::to_string_pretty(&json)?), json))
        }
    }
}

fn ingest(args: IngestArgs) -> Result<Output, Error> {
    let repo = open_repo()?;
    let name = args
        .path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut desc = ArtifactDescription::for_file_name(&name);
    if let Some(f) = args.format {
        desc.data_format = f;
    }
    if let Some(m) = args.modality {
        desc.modality = m;
    }
    for (k, v) in &args.label {
        desc = desc.with_label(k, v);
    }
    let subjects = args
        .subject
        .iter()
        .map(|s| parse_subject(s))
        .collect::<Result<Vec<_>, _>>()?;
    let agent = args.agent.unwrap_or_else(default_agent);
    let id = repo.ingest_raw(&args.path, desc, subjects, &agent)?;
    Ok(Output::ok(format!("{id}\n"), json!({ "artifact_id": id })))
}

fn run(args: RunArgs) -> Result<Output, Error> {
    let repo = open_repo()?;
    let code_dir = std::env::current_dir().map_err(|e| Error::Storage(format!("current directory: {e}")))?;
    let spec = StepSpec {
        command: args.command,
        declared_inputs: args.inputs,
        declared_outputs: args.outputs,
        transformation_type: args.transformation_type,
        config: args.config.into_iter().collect(),
        nondeterministic: args.nondeterministic,
        dependency_manifest: args.deps,
        agent: args.agent.unwrap_or_else(default_agent),
        code_dir,
        timeout: args.timeout.map(Duration::from_secs),
    };
    let record = match repo.run_step(&spec) {
        Ok(r) => r,
        Err(e) => {
            if let Error::StepFailed { stderr, .. } = &e {
                let tail = String::from_utf8_lossy(stderr);
                for line in tail.lines().rev().take(10).collect::<Vec<_>>().into_iter().rev() {
                    eprintln!("  | {line}");
                }
            }
            return Err(e);
        }
    };
    let mut text = format!("process {}\n", record.process_id);
    for (id, name) in record.body.outputs.iter().zip(&record.body.output_names) {
        text.push_str(&format!("output {name} {id}\n"));
    }
    Ok(Output::ok(text, to_value(&record)?))
}

fn replay(args: ReplayArgs) -> Result<Output, Error> {
    let repo = open_repo()?;
    let policy = ReplayPolicy {
        environment_check: args.env,
        timeout_seconds: args.timeout.unwrap_or(repo.config().step_timeout_seconds),
        keep_workdirs: args.keep,
    };
    let results = match args.process {
        Some(pid) => vec![repo.replay_process(&pid, &policy)?],
        None => match repo.replay_subgraph(&args.roots, &policy) {
            Ok(r) => r,
            Err(Error::Replay { message, completed }) => {
                for r in &completed {
                    eprintln!("certpro: completed before failure: {} {:?}", r.process_id, r.status);
                }
                return Err(Error::Replay { message, completed });
            }
            Err(e) => return Err(e),
        },
    };
    let ok = results
        .iter()
        .all(|r| matches!(r.status, ReplayStatus::Match | ReplayStatus::Unverifiable));
    Ok(Output {
        text: replay_text(&results),
        json: to_value(&results)?,
        ok,
    })
}

fn replay_text(results: &[ReplayResult]) -> String {
    let mut text = String::new();
    for r in results {
        let status = serde_json::to_value(r.status).ok();
        let status = status.as_ref().and_then(Value::as_str).unwrap_or("?");
        text.push_str(&format!("{} {status}\n", r.process_id));
        for c in &r.output_comparisons {
            let replayed = c
                .replayed
                .as_ref()
                .map(|i| i.to_string())
                .unwrap_or_else(|| "absent".into());
            text.push_str(&format!("  {} recorded={} replayed={replayed}\n", c.name, c.recorded));
        }
        for n in &r.notes {
            text.push_str(&format!("  note: {n}\n"));
        }
    }
    text
}

fn print(output: &Output, json: bool) {
    let mut stdout = std::io::stdout().lock();
    let res = if json {
        if output.json.is_null() {
            Ok(())
        } else {
            writeln!(stdout, "{}", output.json)
        }
    } else {
        stdout.write_all(output.text.as_bytes())
    };
    let _ = res.and_then(|_| stdout.flush());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(output) => {
            print(&output, cli.json);
            if output.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("certpro: error: {e}");
            if cli.json {
                println!("{}", json!({ "error": e.to_string() }));
            }
            ExitCode::from(1)
        }
    }
}
