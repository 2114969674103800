//! Single entry point for the workflow pipeline: conversion, cleaning,
//! validation, refinement, generation, benchmarking, node-base
//! management, server submission, and reward scoring.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use comfyflow::bench::{evaluate, load_dataset, report_emit, EvalOptions};
use comfyflow::executor::{
    lift, submit, to_api_format, validate_executable_with, ExecError, ServerClient, SubmitOutcome,
    ValidateOptions,
};
use comfyflow::genflow::{
    generate_with, load_fewshot_corpus, GenerationBackend, GenerationOutcome, GenerationRequest,
    NearestNeighborBackend,
};
use comfyflow::prompts::TemplateRegistry;
use comfyflow::ir::{
    emit_diagram, emit_graph_workflow, parse_diagram, parse_graph_workflow, WorkflowDiagram,
};
use comfyflow::nodebase::{emit_specs, ingest, merge_spec_lists, parse_specs, top_k, NodeBase};
use comfyflow::reformat::{clean, to_diagram, CleaningOptions};

use config::Config;

#[derive(Parser)]
#[command(name = "comfyflow", version, about = "ComfyUI workflow-graph toolkit")]
struct Cli {
    /// TOML configuration file; COMFYFLOW_* environment variables
    /// override both flags and file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConvertTarget {
    Diagram,
    Workflow,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Llm,
    Nn,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a workflow to a diagram or lift a diagram to a workflow.
    Convert {
        #[arg(long = "to", value_enum)]
        target: ConvertTarget,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Node base snapshot; required when lifting to a workflow.
        #[arg(long)]
        nodebase: Option<PathBuf>,
    },
    /// Normalize special nodes and check connectivity.
    Clean {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the cleaning report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Statically validate a workflow against a node base.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        nodebase: Option<PathBuf>,
        /// Treat unknown link types as errors.
        #[arg(long)]
        strict_types: bool,
    },
    /// Replace unknown diagram nodes via retrieval plus an LLM selector.
    Refine {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        desc: String,
        #[arg(long)]
        nodebase: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a diagram from a task description.
    Generate {
        #[arg(long)]
        desc: String,
        #[arg(long, value_enum)]
        backend: BackendKind,
        /// Few-shot corpus (JSONL); the retrieval corpus for the nn
        /// backend, prompt examples for the llm backend.
        #[arg(long)]
        fewshot: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a backend over a dataset and write the metric report.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        backend: BackendKind,
        #[arg(long)]
        fewshot: Option<PathBuf>,
        /// Judge instruction alignment with the configured LLM.
        #[arg(long)]
        judge: bool,
        /// Submit passing workflows to the configured server.
        #[arg(long)]
        live_server: bool,
        /// Use the self-correcting generation loop instead of one shot.
        #[arg(long)]
        self_correct: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Manage node-base snapshots.
    Nodebase {
        #[command(subcommand)]
        action: NodebaseAction,
    },
    /// Upload a workflow to the configured server.
    Submit {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print a diagram's reward, or the advantages for a reward group.
    Score {
        #[arg(long)]
        diagram: Option<PathBuf>,
        #[arg(long)]
        nodebase: Option<PathBuf>,
        /// Comma-separated binary rewards, e.g. "1,0,1,0,0".
        #[arg(long)]
        rewards: Option<String>,
    },
}

#[derive(Subcommand)]
enum NodebaseAction {
    /// Validate and normalize a snapshot (embeds every name once).
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Union snapshots; on duplicate names the latest file wins.
    Merge {
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the top-k most similar node names.
    Query {
        #[arg(long)]
        nodebase: Option<PathBuf>,
        #[arg(long)]
        name: String,
        #[arg(short)]
        k: Option<usize>,
    },
}

enum CliError {
    Usage(String),
    Failure(String),
    Transport(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
            CliError::Transport(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Failure(m) | CliError::Transport(m) => m,
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

fn failure(message: impl std::fmt::Display) -> CliError {
    CliError::Failure(message.to_string())
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run `comfyflow --help` for usage");
            }
            std::process::exit(e.exit_code());
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| failure(format!("cannot read {}: {e}", path.display())))
}

/// Writes through a temp file in the destination directory and renames
/// into place, so readers never observe partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => parent,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| failure(format!("cannot create temp file in {}: {e}", dir.display())))?;
    tmp.write_all(bytes)
        .map_err(|e| failure(format!("cannot write {}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| failure(format!("cannot persist {}: {e}", path.display())))?;
    Ok(())
}

fn load_base(config: &Config) -> Result<NodeBase, CliError> {
    let path = config
        .nodebase_path
        .as_ref()
        .ok_or_else(|| usage("a node base is required: pass --nodebase or set nodebase_path"))?;
    let bytes = read_file(path)?;
    let provider = config.embedding_provider().map_err(usage)?;
    ingest(&bytes, provider.as_ref()).map_err(failure)
}

fn load_diagram(path: &Path) -> Result<WorkflowDiagram, CliError> {
    parse_diagram(&read_file(path)?).map_err(failure)
}

enum Backend {
    Llm(comfyflow::llm::HttpLlmClient),
    Nn(NearestNeighborBackend),
}

impl Backend {
    fn as_dyn(&self) -> &dyn GenerationBackend {
        match self {
            Backend::Llm(client) => client,
            Backend::Nn(backend) => backend,
        }
    }
}

fn build_backend(
    kind: BackendKind,
    fewshot: &Option<PathBuf>,
    config: &Config,
) -> Result<(Backend, Vec<(String, WorkflowDiagram)>), CliError> {
    let corpus = match fewshot {
        Some(path) => load_fewshot_corpus(&read_file(path)?).map_err(failure)?,
        None => Vec::new(),
    };
    match kind {
        BackendKind::Llm => {
            let client = config.llm_client().map_err(usage)?;
            Ok((Backend::Llm(client), corpus))
        }
        BackendKind::Nn => {
            if corpus.is_empty() {
                return Err(usage("--backend nn requires a --fewshot corpus"));
            }
            let provider = config.embedding_provider().map_err(usage)?;
            let backend = NearestNeighborBackend::new(corpus, provider).map_err(failure)?;
            // The nn backend retrieves whole diagrams; prompt examples
            // would only inflate the prompt it ignores.
            Ok((Backend::Nn(backend), Vec::new()))
        }
    }
}

fn template_registry(config: &Config) -> Result<TemplateRegistry, CliError> {
    match &config.prompts_dir {
        Some(dir) => TemplateRegistry::with_overrides(dir).map_err(failure),
        None => Ok(TemplateRegistry::builtin()),
    }
}

fn server_client(config: &Config) -> Result<ServerClient, CliError> {
    let base_url = config
        .server
        .base_url
        .clone()
        .ok_or_else(|| usage("server.base_url is required (config or COMFYFLOW_SERVER_BASE_URL)"))?;
    ServerClient::new(base_url, Duration::from_secs(60)).map_err(failure)
}

/// Batch mode: cleans every `.json` under `input` into `out` (same file
/// names) on a bounded worker pool; rejected workflows are skipped and
/// listed in the summary report.
fn clean_directory(
    input: &Path,
    out: &Path,
    report_path: Option<&Path>,
    config: &Config,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| failure(format!("cannot create {}: {e}", out.display())))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| failure(format!("cannot read {}: {e}", input.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    files.sort();
    let options = CleaningOptions::default();
    let results = comfyflow::parallel_map(&files, config.clean_parallelism(), |path| {
        let bytes = std::fs::read(path).ok()?;
        let graph = parse_graph_workflow(&bytes).ok()?;
        let (cleaned, report) = clean(&graph, &options).ok()?;
        Some((path.clone(), cleaned, report))
    });
    let mut kept = 0usize;
    let mut rejected = Vec::new();
    let mut unreadable = 0usize;
    for result in results {
        match result {
            None => unreadable += 1,
            Some((path, cleaned, report)) => {
                if let Some(reason) = report.rejected {
                    rejected.push(serde_json::json!({
                        "file": path.file_name().and_then(|n| n.to_str()),
                        "reason": reason,
                    }));
                    continue;
                }
                let target = out.join(path.file_name().expect("file from read_dir"));
                write_atomic(&target, &emit_graph_workflow(&cleaned))?;
                kept += 1;
            }
        }
    }
    if let Some(path) = report_path {
        let summary = serde_json::json!({
            "total": files.len(),
            "kept": kept,
            "rejected": rejected,
            "unreadable": unreadable,
        });
        write_atomic(path, &serde_json::to_vec_pretty(&summary).unwrap())?;
    }
    println!(
        "cleaned {kept}/{} workflows into {} ({} rejected, {unreadable} unreadable)",
        files.len(),
        out.display(),
        rejected.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = Config::load(cli.config.as_deref()).map_err(CliError::Usage)?;

    match cli.command {
        Command::Convert {
            target,
            input,
            out,
            nodebase,
        } => {
            config.override_nodebase(nodebase);
            match target {
                ConvertTarget::Diagram => {
                    let graph = parse_graph_workflow(&read_file(&input)?).map_err(failure)?;
                    let diagram = to_diagram(&graph).map_err(failure)?;
                    write_atomic(&out, &emit_diagram(&diagram))?;
                    println!("wrote {} links to {}", diagram.len(), out.display());
                }
                ConvertTarget::Workflow => {
                    let diagram = load_diagram(&input)?;
                    let base = load_base(&config)?;
                    let graph = lift(&diagram, &base).map_err(failure)?;
                    write_atomic(&out, &emit_graph_workflow(&graph))?;
                    println!(
                        "wrote {} nodes / {} links to {}",
                        graph.nodes.len(),
                        graph.links.len(),
                        out.display()
                    );
                }
            }
            Ok(())
        }

        Command::Clean { input, out, report } => {
            if input.is_dir() {
                return clean_directory(&input, &out, report.as_deref(), &config);
            }
            let graph = parse_graph_workflow(&read_file(&input)?).map_err(failure)?;
            let (cleaned, cleaning_report) =
                clean(&graph, &CleaningOptions::default()).map_err(failure)?;
            write_atomic(&out, &emit_graph_workflow(&cleaned))?;
            let report_json =
                serde_json::to_vec_pretty(&cleaning_report).expect("report serialization");
            if let Some(path) = report {
                write_atomic(&path, &report_json)?;
            }
            println!(
                "removed {} nodes, spliced {} links, added {} links",
                cleaning_report.removed_nodes.len(),
                cleaning_report.spliced_links,
                cleaning_report.added_links
            );
            match cleaning_report.rejected {
                Some(reason) => Err(failure(format!("workflow rejected: {reason}"))),
                None => Ok(()),
            }
        }

        Command::Validate {
            input,
            nodebase,
            strict_types,
        } => {
            config.override_nodebase(nodebase);
            let graph = parse_graph_workflow(&read_file(&input)?).map_err(failure)?;
            let base = load_base(&config)?;
            let report =
                validate_executable_with(&graph, &base, ValidateOptions { strict_types });
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serialization")
            );
            if report.valid {
                Ok(())
            } else {
                Err(failure(format!("{} issues found", report.issues.len())))
            }
        }

        Command::Refine {
            input,
            desc,
            nodebase,
            out,
        } => {
            config.override_nodebase(nodebase);
            let diagram = load_diagram(&input)?;
            let base = load_base(&config)?;
            let provider = config.embedding_provider().map_err(usage)?;
            let llm = config.llm_client().map_err(usage)?;
            let options = comfyflow::refine::RefineOptions {
                k: config.refine_k,
                registry: template_registry(&config)?,
                ..comfyflow::refine::RefineOptions::default()
            };
            let outcome = comfyflow::refine::refine_with(
                &diagram,
                &desc,
                &base,
                provider.as_ref(),
                &llm,
                &options,
            );
            write_atomic(&out, &emit_diagram(&outcome.diagram))?;
            let summary = serde_json::json!({
                "replacements": outcome.replacements,
                "unresolved": outcome.unresolved,
                "truncated_prompts": outcome.truncated_prompts,
            });
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
            if outcome.unresolved.is_empty() {
                Ok(())
            } else {
                Err(failure(format!(
                    "{} nodes left unresolved",
                    outcome.unresolved.len()
                )))
            }
        }

        Command::Generate {
            desc,
            backend,
            fewshot,
            out,
        } => {
            let base = load_base(&config)?;
            let (backend, examples) = build_backend(backend, &fewshot, &config)?;
            let request = GenerationRequest {
                description: desc,
                few_shot_examples: examples,
                max_attempts: config.max_attempts,
            };
            let registry = template_registry(&config)?;
            match generate_with(&request, backend.as_dyn(), &base, &registry) {
                GenerationOutcome::Ok {
                    diagram,
                    attempts_used,
                } => {
                    write_atomic(&out, &emit_diagram(&diagram))?;
                    println!(
                        "generated {} links in {attempts_used} attempt(s); wrote {}",
                        diagram.len(),
                        out.display()
                    );
                    Ok(())
                }
                GenerationOutcome::Failed {
                    attempts_used,
                    last_error,
                } => {
                    let message = format!(
                        "generation failed after {attempts_used} attempt(s): {last_error}"
                    );
                    match last_error {
                        comfyflow::genflow::GenError::Backend(
                            comfyflow::llm::LlmError::Transport(_),
                        ) => Err(CliError::Transport(message)),
                        _ => Err(failure(message)),
                    }
                }
            }
        }

        Command::Bench {
            dataset,
            backend,
            fewshot,
            judge,
            live_server,
            self_correct,
            out,
        } => {
            let loaded = load_dataset(&read_file(&dataset)?).map_err(failure)?;
            for bad in &loaded.malformed {
                eprintln!("warning: line {}: {}", bad.line, bad.message);
            }
            let base = load_base(&config)?;
            let (backend, _) = build_backend(backend, &fewshot, &config)?;
            let judge_client = if judge {
                Some(config.llm_client().map_err(usage)?)
            } else {
                None
            };
            let server = if live_server {
                Some(server_client(&config)?)
            } else {
                None
            };
            let options = EvalOptions {
                parallelism: config.parallelism.bench,
                self_correct,
                max_attempts: config.max_attempts,
                registry: template_registry(&config)?,
            };
            let report = evaluate(
                &loaded.records,
                backend.as_dyn(),
                &base,
                judge_client.as_ref().map(|c| c as &dyn comfyflow::llm::LlmClient),
                server.as_ref(),
                &options,
            )
            .map_err(failure)?;
            write_atomic(&out, &report_emit(&report))?;
            let pia_text = report
                .pia
                .map(|p| format!("{:.1}%", p * 100.0))
                .unwrap_or_else(|| "n/a".into());
            println!(
                "fv {:.1}% pa {:.1}% pia {} pnd {} over {} records ({} failures)",
                report.fv * 100.0,
                report.pa * 100.0,
                pia_text,
                report.pnd,
                report.total,
                report.failures.len()
            );
            Ok(())
        }

        Command::Nodebase { action } => match action {
            NodebaseAction::Ingest { input, out } => {
                let provider = config.embedding_provider().map_err(usage)?;
                let base = ingest(&read_file(&input)?, provider.as_ref()).map_err(failure)?;
                write_atomic(&out, &emit_specs(&base))?;
                println!("ingested {} node specs", base.len());
                Ok(())
            }
            NodebaseAction::Merge { inputs, out } => {
                let mut lists = Vec::new();
                for path in &inputs {
                    lists.push(parse_specs(&read_file(path)?).map_err(failure)?);
                }
                let merged = merge_spec_lists(lists);
                let bytes =
                    serde_json::to_vec_pretty(&merged).expect("spec serialization");
                write_atomic(&out, &bytes)?;
                println!("merged {} files into {} node specs", inputs.len(), merged.len());
                Ok(())
            }
            NodebaseAction::Query { nodebase, name, k } => {
                config.override_nodebase(nodebase);
                let base = load_base(&config)?;
                let provider = config.embedding_provider().map_err(usage)?;
                let hits = top_k(
                    &base,
                    &name,
                    k.unwrap_or(config.refine_k),
                    provider.as_ref(),
                )
                .map_err(failure)?;
                for (node_name, score) in hits {
                    println!("{score:.6}\t{node_name}");
                }
                Ok(())
            }
        },

        Command::Submit { input } => {
            let graph = parse_graph_workflow(&read_file(&input)?).map_err(failure)?;
            // Fail fast on workflows the server would reject anyway.
            to_api_format(&graph).map_err(failure)?;
            let server = server_client(&config)?;
            match submit(&graph, &server) {
                Ok(SubmitOutcome::Accepted { prompt_id }) => {
                    println!("accepted: {prompt_id}");
                    Ok(())
                }
                Ok(SubmitOutcome::Rejected { server_message }) => {
                    Err(failure(format!("rejected: {server_message}")))
                }
                Err(ExecError::Transport(message)) => Err(CliError::Transport(message)),
                Err(other) => Err(failure(other)),
            }
        }

        Command::Score {
            diagram,
            nodebase,
            rewards,
        } => match (diagram, rewards) {
            (Some(_), Some(_)) => Err(usage("--diagram and --rewards are mutually exclusive")),
            (None, None) => Err(usage("score needs either --diagram or --rewards")),
            (Some(path), None) => {
                config.override_nodebase(nodebase);
                let diagram = load_diagram(&path)?;
                let base = load_base(&config)?;
                let value = comfyflow::genflow::reward(&diagram, &base.name_set());
                println!("{value}");
                Ok(())
            }
            (None, Some(text)) => {
                let rewards: Vec<f64> = text
                    .split(',')
                    .map(|part| {
                        part.trim()
                            .parse::<f64>()
                            .map_err(|_| usage(format!("bad reward value: {part}")))
                    })
                    .collect::<Result<_, _>>()?;
                let group = comfyflow::genflow::GroupRewards::new(rewards).map_err(failure)?;
                let advantages = comfyflow::genflow::advantages(&group);
                let line = advantages
                    .advantages()
                    .iter()
                    .map(|a| a.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                println!("{line}");
                Ok(())
            }
        },
    }
}
