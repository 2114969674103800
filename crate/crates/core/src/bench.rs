//! Evaluation harness: runs a generation backend over a dataset of
//! (description, reference workflow, category) records and scores
//! format validity, executability, instruction alignment, and node
//! diversity.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::executor::{lift, submit, validate_executable, ServerClient, SubmitOutcome};
use crate::genflow::{
    build_fewshot_prompt_in, generate_with, parse_generation, structural_check,
    GenerationBackend, GenerationOutcome, GenerationRequest,
};
use crate::ir::{parse_graph_workflow, GraphWorkflow};
use crate::llm::LlmClient;
use crate::nodebase::NodeBase;
use crate::prompts::{bindings, TemplateId, TemplateRegistry};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("dataset contains no valid records")]
    EmptyDataset,
    #[error("no records to evaluate")]
    EmptyRecords,
    #[error("malformed report: {0}")]
    MalformedReport(String),
}

/// The six task categories.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Category {
    #[serde(rename = "Text-to-Image Generation")]
    TextToImage,
    #[serde(rename = "Image Editing")]
    ImageEditing,
    #[serde(rename = "Style Transfer")]
    StyleTransfer,
    #[serde(rename = "3D Generation")]
    ThreeDGeneration,
    #[serde(rename = "Video Editing or Generation")]
    VideoEditingOrGeneration,
    #[serde(rename = "Others")]
    Other,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::TextToImage,
        Category::ImageEditing,
        Category::StyleTransfer,
        Category::ThreeDGeneration,
        Category::VideoEditingOrGeneration,
        Category::Other,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            Category::TextToImage => "Text-to-Image Generation",
            Category::ImageEditing => "Image Editing",
            Category::StyleTransfer => "Style Transfer",
            Category::ThreeDGeneration => "3D Generation",
            Category::VideoEditingOrGeneration => "Video Editing or Generation",
            Category::Other => "Others",
        }
    }
}

/// The image-editing subcategories.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Subcategory {
    #[serde(rename = "HD Upscaling/Image Restoration")]
    HdUpscalingRestoration,
    #[serde(rename = "Redrawing")]
    Redrawing,
    #[serde(rename = "Outpainting")]
    Outpainting,
    #[serde(rename = "Character-Based Guidance")]
    CharacterGuidance,
    #[serde(rename = "Face Swap")]
    FaceSwap,
    #[serde(rename = "Background Change/Remove")]
    BackgroundChangeRemove,
}

/// One dataset entry. A subcategory is only meaningful for image
/// editing.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub description: String,
    pub reference_workflow: Option<GraphWorkflow>,
    pub category: Category,
    pub subcategory: Option<Subcategory>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MalformedRecord {
    pub line: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub records: Vec<BenchRecord>,
    pub malformed: Vec<MalformedRecord>,
}

/// Parses a JSONL dataset. Invalid lines are collected with their line
/// numbers; the load is fatal only when no line is valid.
pub fn load_dataset(bytes: &[u8]) -> Result<LoadedDataset, BenchError> {
    #[derive(Deserialize)]
    struct Line {
        description: String,
        #[serde(default)]
        workflow: Option<Value>,
        category: Category,
        #[serde(default)]
        subcategory: Option<Subcategory>,
    }

    let text = String::from_utf8_lossy(bytes);
    let mut records = Vec::new();
    let mut malformed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = match serde_json::from_str(line) {
            Ok(p) => p,
            Err(e) => {
                malformed.push(MalformedRecord {
                    line: line_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if parsed.subcategory.is_some() && parsed.category != Category::ImageEditing {
            malformed.push(MalformedRecord {
                line: line_no,
                message: "subcategory is only valid for Image Editing".into(),
            });
            continue;
        }
        let reference_workflow = match parsed.workflow {
            None => None,
            Some(value) => {
                let bytes = serde_json::to_vec(&value).expect("value serialization");
                match parse_graph_workflow(&bytes) {
                    Ok(g) => Some(g),
                    Err(e) => {
                        malformed.push(MalformedRecord {
                            line: line_no,
                            message: format!("workflow: {e}"),
                        });
                        continue;
                    }
                }
            }
        };
        records.push(BenchRecord {
            description: parsed.description,
            reference_workflow,
            category: parsed.category,
            subcategory: parsed.subcategory,
        });
    }
    if records.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    Ok(LoadedDataset { records, malformed })
}

/// Per-category slice of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub total: usize,
    pub fv: f64,
    pub pa: f64,
    pub pia: Option<f64>,
    pub pnd: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub index: usize,
    pub stage: String,
    pub error: String,
}

/// Aggregate metrics. `fv >= pa >= pia` holds by construction: each
/// later stage conditions on the earlier one. `pia` is `None` when no
/// judge was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub total: usize,
    pub fv: f64,
    pub pa: f64,
    pub pia: Option<f64>,
    pub pnd: usize,
    pub per_category: BTreeMap<Category, CategoryStats>,
    pub failures: Vec<RecordFailure>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub parallelism: usize,
    /// Use the self-correcting generation loop instead of one attempt.
    pub self_correct: bool,
    pub max_attempts: u32,
    /// Template source, overridable for experimentation.
    pub registry: TemplateRegistry,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            parallelism: 8,
            self_correct: false,
            max_attempts: 3,
            registry: TemplateRegistry::builtin(),
        }
    }
}

struct RecordResult {
    category: Category,
    fv: bool,
    pa: bool,
    pia_yes: bool,
    node_types: BTreeSet<String>,
    failure: Option<(String, String)>,
}

fn judge_says_yes(reply: &str) -> Option<bool> {
    let token: String = reply
        .chars()
        .skip_while(|c| !c.is_alphanumeric())
        .take_while(|c| c.is_alphanumeric())
        .collect();
    if token.eq_ignore_ascii_case("yes") {
        Some(true)
    } else if token.eq_ignore_ascii_case("no") {
        Some(false)
    } else {
        None
    }
}

fn evaluate_record<B>(
    record: &BenchRecord,
    backend: &B,
    base: &NodeBase,
    judge: Option<&dyn LlmClient>,
    server: Option<&ServerClient>,
    opts: &EvalOptions,
) -> RecordResult
where
    B: GenerationBackend + ?Sized,
{
    let registry = &opts.registry;
    let mut result = RecordResult {
        category: record.category,
        fv: false,
        pa: false,
        pia_yes: false,
        node_types: BTreeSet::new(),
        failure: None,
    };
    let fail = |stage: &str, error: String| Some((stage.to_string(), error));

    // Format validation: one reply that parses and passes structure.
    let request = GenerationRequest {
        description: record.description.clone(),
        few_shot_examples: Vec::new(),
        max_attempts: opts.max_attempts,
    };
    let diagram = if opts.self_correct {
        match generate_with(&request, backend, base, registry) {
            GenerationOutcome::Ok { diagram, .. } => diagram,
            GenerationOutcome::Failed { last_error, .. } => {
                result.failure = fail("generate", last_error.to_string());
                return result;
            }
        }
    } else {
        let prompt = build_fewshot_prompt_in(registry, &request);
        let reply = match backend.complete(&prompt) {
            Ok(r) => r,
            Err(e) => {
                result.failure = fail("backend", e.to_string());
                return result;
            }
        };
        let diagram = match parse_generation(&reply) {
            Ok(d) => d,
            Err(e) => {
                result.failure = fail("parse", e.to_string());
                return result;
            }
        };
        if let Err(e) = structural_check(&diagram) {
            result.failure = fail("structural", e.to_string());
            return result;
        }
        diagram
    };
    result.fv = true;

    // Executability: lift plus static validation, and optionally a live
    // server submission.
    let graph = match lift(&diagram, base) {
        Ok(g) => g,
        Err(e) => {
            result.failure = fail("lift", e.to_string());
            return result;
        }
    };
    let report = validate_executable(&graph, base);
    if !report.valid {
        let first = &report.issues[0];
        result.failure = fail(
            "validate",
            format!("{:?} {}: {}", first.code, first.subject, first.message),
        );
        return result;
    }
    if let Some(server) = server {
        match submit(&graph, server) {
            Ok(SubmitOutcome::Accepted { .. }) => {}
            Ok(SubmitOutcome::Rejected { server_message }) => {
                result.failure = fail("submit", server_message);
                return result;
            }
            Err(e) => {
                result.failure = fail("submit", e.to_string());
                return result;
            }
        }
    }
    result.pa = true;
    result.node_types = diagram.type_names().iter().map(|s| s.to_string()).collect();

    // Instruction alignment, judged only for executable workflows.
    if let Some(judge) = judge {
        let nodes: Vec<&str> = result.node_types.iter().map(|s| s.as_str()).collect();
        let nodes_json = serde_json::to_string(&nodes).expect("string list serialization");
        let prompt = registry
            .render(
                TemplateId::PiaJudge,
                &bindings([
                    ("Description", record.description.as_str()),
                    ("Nodes", nodes_json.as_str()),
                ]),
            )
            .expect("judge template slots are known");
        match judge.complete(&prompt) {
            Ok(reply) => match judge_says_yes(&reply) {
                Some(yes) => result.pia_yes = yes,
                None => {
                    result.failure = fail("judge", format!("unrecognized reply: {reply}"));
                }
            },
            Err(e) => {
                result.failure = fail("judge", e.to_string());
            }
        }
    }
    result
}

/// Evaluates every record independently (bounded parallelism) and
/// merges the results into a report. Single-record failures are
/// recorded, never fatal.
pub fn evaluate<B>(
    records: &[BenchRecord],
    backend: &B,
    base: &NodeBase,
    judge: Option<&dyn LlmClient>,
    server: Option<&ServerClient>,
    opts: &EvalOptions,
) -> Result<BenchReport, BenchError>
where
    B: GenerationBackend + ?Sized,
{
    if records.is_empty() {
        return Err(BenchError::EmptyRecords);
    }
    let results = crate::parallel_map(records, opts.parallelism, |record| {
        evaluate_record(record, backend, base, judge, server, opts)
    });

    let total = records.len();
    let mut fv = 0usize;
    let mut pa = 0usize;
    let mut pia = 0usize;
    let mut pnd: BTreeSet<String> = BTreeSet::new();
    let mut failures = Vec::new();
    let mut per_category: BTreeMap<Category, (usize, usize, usize, usize, BTreeSet<String>)> =
        BTreeMap::new();

    for (index, result) in results.into_iter().enumerate() {
        let slot = per_category.entry(result.category).or_default();
        slot.0 += 1;
        if result.fv {
            fv += 1;
            slot.1 += 1;
        }
        if result.pa {
            pa += 1;
            slot.2 += 1;
            pnd.extend(result.node_types.iter().cloned());
            slot.4.extend(result.node_types.iter().cloned());
        }
        if result.pia_yes {
            pia += 1;
            slot.3 += 1;
        }
        if let Some((stage, error)) = result.failure {
            failures.push(RecordFailure {
                index,
                stage,
                error,
            });
        }
    }
    failures.sort_by_key(|f| f.index);

    let frac = |count: usize, denom: usize| count as f64 / denom as f64;
    let report = BenchReport {
        total,
        fv: frac(fv, total),
        pa: frac(pa, total),
        pia: judge.map(|_| frac(pia, total)),
        pnd: pnd.len(),
        per_category: per_category
            .into_iter()
            .map(|(cat, (t, f, p, y, types))| {
                (
                    cat,
                    CategoryStats {
                        total: t,
                        fv: frac(f, t),
                        pa: frac(p, t),
                        pia: judge.map(|_| frac(y, t)),
                        pnd: types.len(),
                    },
                )
            })
            .collect(),
        failures,
    };
    debug_assert!(report.fv >= report.pa);
    debug_assert!(report.pia.is_none_or(|p| report.pa >= p));
    Ok(report)
}

fn pct(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

/// Serializes a report deterministically, adding percentage renderings
/// with one decimal place alongside the raw fractions.
pub fn report_emit(report: &BenchReport) -> Vec<u8> {
    let mut value = serde_json::to_value(report).expect("report serialization");
    let obj = value.as_object_mut().expect("report is an object");
    obj.insert("fv_pct".into(), Value::String(pct(report.fv)));
    obj.insert("pa_pct".into(), Value::String(pct(report.pa)));
    obj.insert(
        "pia_pct".into(),
        report.pia.map(|p| Value::String(pct(p))).unwrap_or(Value::Null),
    );
    if let Some(categories) = obj.get_mut("per_category").and_then(Value::as_object_mut) {
        let stats: Vec<(String, f64, f64, Option<f64>)> = report
            .per_category
            .iter()
            .map(|(cat, s)| (cat.display_name().to_string(), s.fv, s.pa, s.pia))
            .collect();
        for (name, fv, pa, pia) in stats {
            if let Some(entry) = categories.get_mut(&name).and_then(Value::as_object_mut) {
                entry.insert("fv_pct".into(), Value::String(pct(fv)));
                entry.insert("pa_pct".into(), Value::String(pct(pa)));
                entry.insert(
                    "pia_pct".into(),
                    pia.map(|p| Value::String(pct(p))).unwrap_or(Value::Null),
                );
            }
        }
    }
    serde_json::to_vec_pretty(&value).expect("report serialization")
}

/// Parses a report emitted by [`report_emit`]; the derived `_pct`
/// fields are ignored.
pub fn report_parse(bytes: &[u8]) -> Result<BenchReport, BenchError> {
    serde_json::from_slice(bytes).map_err(|e| BenchError::MalformedReport(e.to_string()))
}
