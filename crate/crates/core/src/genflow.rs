//! Generation-side plumbing: few-shot prompt construction, reply
//! parsing, the self-correcting generation loop, generation backends,
//! and the group-relative reward/advantage math as pure functions.

use std::collections::BTreeSet;

use serde::Deserialize;
use thiserror::Error;

use crate::ir::{emit_diagram, parse_diagram, IrError, WorkflowDiagram};
use crate::llm::{json_payload, LlmClient, LlmError};
use crate::nodebase::{similarity, Embedding, EmbeddingProvider, NodeBase};
use crate::prompts::{bindings, TemplateId, TemplateRegistry};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("no json payload found in reply")]
    NoJsonFound,
    #[error("reply json has an unexpected shape: {0}")]
    UnexpectedShape(String),
    #[error("empty diagram: a workflow must contain at least one node")]
    EmptyDiagram,
    #[error("unknown nodes: {}", .0.join(", "))]
    FictitiousNodes(Vec<String>),
    #[error("invalid reward group: {0}")]
    InvalidGroup(String),
    #[error("corpus line {line}: {message}")]
    MalformedCorpus { line: usize, message: String },
    #[error(transparent)]
    Diagram(#[from] IrError),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

// ---------------------------------------------------------------------------
// Reward and advantages
// ---------------------------------------------------------------------------

/// Binary reward: 1 iff every node type in the diagram is a known name.
/// The empty diagram scores 1 (vacuous universal quantifier); structural
/// validation rejects empty diagrams upstream.
pub fn reward(diagram: &WorkflowDiagram, valid_names: &BTreeSet<String>) -> f64 {
    let all_known = diagram
        .links()
        .iter()
        .flat_map(|l| [&l.out_node.type_name, &l.in_node.type_name])
        .all(|name| valid_names.contains(name));
    if all_known {
        1.0
    } else {
        0.0
    }
}

/// Node type names in the diagram that are not known, sorted and
/// deduplicated.
pub fn unknown_names(diagram: &WorkflowDiagram, valid_names: &BTreeSet<String>) -> Vec<String> {
    diagram
        .type_names()
        .into_iter()
        .filter(|n| !valid_names.contains(*n))
        .map(str::to_string)
        .collect()
}

/// Rewards r_1..r_G for one sampled group; each is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRewards {
    rewards: Vec<f64>,
}

impl GroupRewards {
    pub fn new(rewards: Vec<f64>) -> Result<Self, GenError> {
        if rewards.is_empty() {
            return Err(GenError::InvalidGroup("group size must be at least 1".into()));
        }
        if let Some(bad) = rewards.iter().find(|r| **r != 0.0 && **r != 1.0) {
            return Err(GenError::InvalidGroup(format!(
                "rewards must be exactly 0 or 1, got {bad}"
            )));
        }
        Ok(GroupRewards { rewards })
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn group_size(&self) -> usize {
        self.rewards.len()
    }
}

/// Advantages parallel to one group's rewards; zero-mean with unit
/// population std unless the rewards were constant.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    advantages: Vec<f64>,
}

impl AdvantageSet {
    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }
}

/// Normalizes rewards within the group: (r_i - mean) / std, using the
/// population standard deviation. A zero-variance group maps to all
/// zeros.
pub fn advantages(group: &GroupRewards) -> AdvantageSet {
    let n = group.rewards.len() as f64;
    let mean = group.rewards.iter().sum::<f64>() / n;
    let variance = group
        .rewards
        .iter()
        .map(|r| (r - mean) * (r - mean))
        .sum::<f64>()
        / n;
    let std = variance.sqrt();
    let advantages = if std == 0.0 {
        vec![0.0; group.rewards.len()]
    } else {
        group.rewards.iter().map(|r| (r - mean) / std).collect()
    };
    AdvantageSet { advantages }
}

// ---------------------------------------------------------------------------
// Prompt construction and reply parsing
// ---------------------------------------------------------------------------

/// A generation request: the target description plus optional few-shot
/// example pairs.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub description: String,
    pub few_shot_examples: Vec<(String, WorkflowDiagram)>,
    pub max_attempts: u32,
}

impl GenerationRequest {
    pub fn new(description: impl Into<String>) -> Self {
        GenerationRequest {
            description: description.into(),
            few_shot_examples: Vec::new(),
            max_attempts: 3,
        }
    }
}

fn render_examples(examples: &[(String, WorkflowDiagram)]) -> String {
    examples
        .iter()
        .map(|(description, diagram)| {
            format!(
                "Description: {description} Diagram: {}",
                String::from_utf8(emit_diagram(diagram)).expect("diagram json is utf-8")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Instantiates the few-shot template with the request's example pairs
/// and description.
pub fn build_fewshot_prompt(request: &GenerationRequest) -> String {
    build_fewshot_prompt_in(&TemplateRegistry::builtin(), request)
}

/// Same, rendering from a caller-supplied template registry.
pub fn build_fewshot_prompt_in(registry: &TemplateRegistry, request: &GenerationRequest) -> String {
    let examples = render_examples(&request.few_shot_examples);
    registry
        .render(
            TemplateId::FewShot,
            &bindings([
                ("Examples", examples.as_str()),
                ("Description", request.description.as_str()),
            ]),
        )
        .expect("few-shot template slots are known")
}

/// Parses a backend reply into a diagram. Accepts a fenced JSON block or
/// bare JSON, holding either a link array or an object with a `diagram`
/// key.
pub fn parse_generation(text: &str) -> Result<WorkflowDiagram, GenError> {
    let payload = json_payload(text).ok_or(GenError::NoJsonFound)?;
    let value: serde_json::Value = serde_json::from_str(&payload)
        .map_err(|e| GenError::Diagram(IrError::MalformedJson(e.to_string())))?;
    let array = match value {
        serde_json::Value::Array(_) => value,
        serde_json::Value::Object(mut obj) => obj
            .remove("diagram")
            .ok_or_else(|| GenError::UnexpectedShape("object has no \"diagram\" key".into()))?,
        other => {
            return Err(GenError::UnexpectedShape(format!(
                "expected an array or object, got {other}"
            )))
        }
    };
    let bytes = serde_json::to_vec(&array).expect("value serialization is infallible");
    Ok(parse_diagram(&bytes)?)
}

/// Structural acceptance for generated diagrams. Parsing already
/// enforces diagram invariants; generation additionally rejects the
/// empty diagram because a workflow must contain at least one node.
pub fn structural_check(diagram: &WorkflowDiagram) -> Result<(), GenError> {
    if diagram.is_empty() {
        return Err(GenError::EmptyDiagram);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Prompt-in, text-out generation backend.
pub trait GenerationBackend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

/// Every completion client is usable as a generation backend.
impl<T: LlmClient + ?Sized> GenerationBackend for T {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        LlmClient::complete(self, prompt)
    }
}

/// Offline baseline: returns the diagram of the corpus entry whose
/// description is most similar to the request's description.
pub struct NearestNeighborBackend {
    corpus: Vec<(String, WorkflowDiagram)>,
    embeddings: Vec<Embedding>,
    provider: Box<dyn EmbeddingProvider>,
}

impl NearestNeighborBackend {
    pub fn new(
        corpus: Vec<(String, WorkflowDiagram)>,
        provider: Box<dyn EmbeddingProvider>,
    ) -> Result<Self, GenError> {
        if corpus.is_empty() {
            return Err(GenError::InvalidGroup(
                "nearest-neighbor backend needs a non-empty corpus".into(),
            ));
        }
        let embeddings = corpus
            .iter()
            .map(|(description, _)| provider.embed(description))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| GenError::Backend(LlmError::Transport(e.to_string())))?;
        Ok(NearestNeighborBackend {
            corpus,
            embeddings,
            provider,
        })
    }

    /// The few-shot template ends with `Description: <desc> Notes:`, so
    /// the query is the text between the last description marker and the
    /// notes that follow it.
    fn extract_description(prompt: &str) -> &str {
        let Some(start) = prompt.rfind("Description: ") else {
            return prompt;
        };
        let tail = &prompt[start + "Description: ".len()..];
        match tail.find(" Notes:") {
            Some(end) => &tail[..end],
            None => tail,
        }
    }
}

impl GenerationBackend for NearestNeighborBackend {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let description = Self::extract_description(prompt);
        let query = self
            .provider
            .embed(description)
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (i, embedding) in self.embeddings.iter().enumerate() {
            let score = similarity(&query, embedding)
                .map_err(|e| LlmError::Transport(e.to_string()))?;
            if score > best_score {
                best = i;
                best_score = score;
            }
        }
        let diagram_json = String::from_utf8(emit_diagram(&self.corpus[best].1))
            .expect("diagram json is utf-8");
        Ok(format!("```json{{\"diagram\": {diagram_json}}}```"))
    }
}

/// Loads a few-shot corpus: JSONL records of
/// `{"description": ..., "diagram": [[...], ...]}`. Blank lines are
/// skipped; any malformed line is an error.
pub fn load_fewshot_corpus(bytes: &[u8]) -> Result<Vec<(String, WorkflowDiagram)>, GenError> {
    #[derive(Deserialize)]
    struct Record {
        description: String,
        diagram: serde_json::Value,
    }
    let text = std::str::from_utf8(bytes).map_err(|e| GenError::MalformedCorpus {
        line: 0,
        message: e.to_string(),
    })?;
    let mut corpus = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(line).map_err(|e| GenError::MalformedCorpus {
                line: i + 1,
                message: e.to_string(),
            })?;
        let diagram_bytes =
            serde_json::to_vec(&record.diagram).expect("value serialization is infallible");
        let diagram = parse_diagram(&diagram_bytes).map_err(|e| GenError::MalformedCorpus {
            line: i + 1,
            message: e.to_string(),
        })?;
        corpus.push((record.description, diagram));
    }
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// Self-correcting generation loop
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum GenerationOutcome {
    Ok {
        diagram: WorkflowDiagram,
        attempts_used: u32,
    },
    Failed {
        attempts_used: u32,
        last_error: GenError,
    },
}

fn check_reply(reply: &str, base: &NodeBase) -> Result<WorkflowDiagram, GenError> {
    let diagram = parse_generation(reply)?;
    structural_check(&diagram)?;
    let valid = base.name_set();
    if reward(&diagram, &valid) == 0.0 {
        return Err(GenError::FictitiousNodes(unknown_names(&diagram, &valid)));
    }
    Ok(diagram)
}

/// Calls the backend up to `max_attempts` times, feeding the previous
/// reply and a one-line error back into the prompt after each failure,
/// and returns the first diagram that parses, passes structural checks,
/// and scores reward 1 against the base.
pub fn generate<B>(
    request: &GenerationRequest,
    backend: &B,
    base: &NodeBase,
) -> GenerationOutcome
where
    B: GenerationBackend + ?Sized,
{
    generate_with(request, backend, base, &TemplateRegistry::builtin())
}

/// [`generate`] with a caller-supplied template registry.
pub fn generate_with<B>(
    request: &GenerationRequest,
    backend: &B,
    base: &NodeBase,
    registry: &TemplateRegistry,
) -> GenerationOutcome
where
    B: GenerationBackend + ?Sized,
{
    let original = build_fewshot_prompt_in(registry, request);
    let mut prompt = original.clone();
    let mut last_error = GenError::NoJsonFound;
    let mut attempts_used = 0;
    for attempt in 1..=request.max_attempts.max(1) {
        attempts_used = attempt;
        match backend.complete(&prompt) {
            Err(e) => {
                last_error = GenError::Backend(e);
                prompt = original.clone();
            }
            Ok(reply) => match check_reply(&reply, base) {
                Ok(diagram) => {
                    debug_assert!(reward(&diagram, &base.name_set()) == 1.0);
                    return GenerationOutcome::Ok {
                        diagram,
                        attempts_used: attempt,
                    };
                }
                Err(e) => {
                    prompt = format!("{original}\nPrevious reply:\n{reply}\nError: {e}\n");
                    last_error = e;
                }
            },
        }
    }
    GenerationOutcome::Failed {
        attempts_used,
        last_error,
    }
}
