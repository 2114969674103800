//! Diagram refinement: detects node names that are unknown to the node
//! base, retrieves similar candidates, asks an LLM to pick the
//! replacement, and rewrites the diagram with port revalidation.

use serde::Deserialize;

use crate::ir::{emit_diagram, Link, NodeRef, PortName, WorkflowDiagram};
use crate::llm::{json_payload, LlmClient, LlmError};
use crate::nodebase::{top_k, EmbeddingProvider, NodeBase, NodeSpec};
use crate::prompts::{bindings, TemplateId, TemplateRegistry};

/// Why an incorrect node could not be replaced.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub enum UnresolvedReason {
    /// The LLM chose a name outside the candidate list.
    NotInCandidates,
    /// A rewritten link's port could not be matched against the chosen
    /// spec.
    PortMismatch,
    /// The chosen name already appears in the diagram; replacing would
    /// merge distinct nodes.
    NameCollision,
    /// Transport failure after the configured retries.
    LlmFailure(String),
    /// The reply was not the required `{"candidate_node_name": ...}`
    /// shape.
    ParseFailure(String),
    /// Candidate retrieval failed.
    RetrievalFailure(String),
}

/// Result of one refinement pass. Every incorrect name lands in exactly
/// one of `replacements` or `unresolved`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub replacements: Vec<(String, String)>,
    pub unresolved: Vec<(String, UnresolvedReason)>,
    pub diagram: WorkflowDiagram,
    /// Prompts whose diagram slot had to be cut to fit the length limit.
    pub truncated_prompts: u32,
}

#[derive(Debug, Clone)]
pub struct RefineOptions {
    /// Candidates retrieved per incorrect node.
    pub k: usize,
    /// Additional attempts after a transport failure.
    pub llm_retries: u32,
    /// Upper bound on prompt length in bytes; the diagram slot is
    /// truncated to fit and the cut is reported.
    pub max_prompt_len: Option<usize>,
    /// Template source, overridable for experimentation.
    pub registry: TemplateRegistry,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            k: 5,
            llm_retries: 2,
            max_prompt_len: None,
            registry: TemplateRegistry::builtin(),
        }
    }
}

/// Node type names appearing in the diagram with no exact-match spec in
/// the base, sorted and deduplicated.
pub fn detect_incorrect(diagram: &WorkflowDiagram, base: &NodeBase) -> Vec<String> {
    diagram
        .type_names()
        .into_iter()
        .filter(|name| !base.contains(name))
        .map(str::to_string)
        .collect()
}

/// Refines with `k` candidates and default retry policy.
pub fn refine(
    diagram: &WorkflowDiagram,
    description: &str,
    base: &NodeBase,
    provider: &dyn EmbeddingProvider,
    llm: &dyn LlmClient,
    k: usize,
) -> RefineOutcome {
    refine_with(
        diagram,
        description,
        base,
        provider,
        llm,
        &RefineOptions {
            k,
            ..RefineOptions::default()
        },
    )
}

pub fn refine_with(
    diagram: &WorkflowDiagram,
    description: &str,
    base: &NodeBase,
    provider: &dyn EmbeddingProvider,
    llm: &dyn LlmClient,
    opts: &RefineOptions,
) -> RefineOutcome {
    let incorrect = detect_incorrect(diagram, base);
    let diagram_json =
        String::from_utf8(emit_diagram(diagram)).expect("diagram json is utf-8");

    let mut truncated_prompts = 0;
    let mut chosen: Vec<(String, String)> = Vec::new();
    let mut unresolved: Vec<(String, UnresolvedReason)> = Vec::new();
    // Selection runs against the original diagram: each incorrect node is
    // resolved independently; rewrites are applied afterwards in order.
    for name in &incorrect {
        match select_candidate(
            name,
            description,
            &diagram_json,
            base,
            provider,
            llm,
            &opts.registry,
            opts,
            &mut truncated_prompts,
        ) {
            Ok(choice) => chosen.push((name.clone(), choice)),
            Err(reason) => unresolved.push((name.clone(), reason)),
        }
    }

    let mut current = diagram.clone();
    let mut replacements = Vec::new();
    for (name, choice) in chosen {
        match apply_replacement(&current, &name, &choice, base) {
            Ok(rewritten) => {
                current = rewritten;
                replacements.push((name, choice));
            }
            Err(reason) => unresolved.push((name, reason)),
        }
    }
    unresolved.sort_by(|a, b| a.0.cmp(&b.0));

    RefineOutcome {
        replacements,
        unresolved,
        diagram: current,
        truncated_prompts,
    }
}

#[allow(clippy::too_many_arguments)]
fn select_candidate(
    incorrect: &str,
    description: &str,
    diagram_json: &str,
    base: &NodeBase,
    provider: &dyn EmbeddingProvider,
    llm: &dyn LlmClient,
    registry: &TemplateRegistry,
    opts: &RefineOptions,
    truncated_prompts: &mut u32,
) -> Result<String, UnresolvedReason> {
    let candidates = top_k(base, incorrect, opts.k, provider)
        .map_err(|e| UnresolvedReason::RetrievalFailure(e.to_string()))?;
    let specs: Vec<&NodeSpec> = candidates
        .iter()
        .map(|(name, _)| base.lookup(name).expect("top_k names come from the base"))
        .collect();
    let nodes_json = serde_json::to_string(&specs).expect("spec serialization is infallible");

    let render = |diagram_slot: &str| {
        registry
            .render(
                TemplateId::RefineSelect,
                &bindings([
                    ("Description", description),
                    ("Diagram", diagram_slot),
                    ("Name", incorrect),
                    ("Nodes", nodes_json.as_str()),
                ]),
            )
            .expect("refine template slots are known")
    };
    let mut prompt = render(diagram_json);
    if let Some(limit) = opts.max_prompt_len {
        if prompt.len() > limit {
            let overhead = render("").len();
            let budget = limit.saturating_sub(overhead);
            let mut cut = diagram_json.len().min(budget);
            while cut > 0 && !diagram_json.is_char_boundary(cut) {
                cut -= 1;
            }
            prompt = render(&diagram_json[..cut]);
            *truncated_prompts += 1;
        }
    }

    let mut attempt = 0;
    let reply = loop {
        match llm.complete(&prompt) {
            Ok(text) => break text,
            Err(LlmError::Transport(_)) if attempt < opts.llm_retries => attempt += 1,
            Err(e) => return Err(UnresolvedReason::LlmFailure(e.to_string())),
        }
    };

    #[derive(Deserialize)]
    struct Choice {
        candidate_node_name: String,
    }
    let payload = json_payload(&reply)
        .ok_or_else(|| UnresolvedReason::ParseFailure("no json payload in reply".into()))?;
    let choice: Choice = serde_json::from_str(&payload)
        .map_err(|e| UnresolvedReason::ParseFailure(e.to_string()))?;
    if !candidates.iter().any(|(n, _)| *n == choice.candidate_node_name) {
        return Err(UnresolvedReason::NotInCandidates);
    }
    Ok(choice.candidate_node_name)
}

/// Rewrites every link mentioning `incorrect` to `chosen`, preserving
/// ordinals, then checks (and where needed re-maps) the ports on the
/// replaced node against the chosen spec.
fn apply_replacement(
    diagram: &WorkflowDiagram,
    incorrect: &str,
    chosen: &str,
    base: &NodeBase,
) -> Result<WorkflowDiagram, UnresolvedReason> {
    if diagram.type_names().contains(chosen) {
        return Err(UnresolvedReason::NameCollision);
    }
    let spec = base.lookup(chosen).expect("chosen candidates are in the base");
    let rename = |node: &NodeRef| -> NodeRef {
        if node.type_name == incorrect {
            NodeRef {
                type_name: chosen.to_string(),
                ordinal: node.ordinal,
            }
        } else {
            node.clone()
        }
    };

    let mut links: Vec<Link> = Vec::with_capacity(diagram.len());
    for link in diagram.links() {
        let mut rewritten = Link {
            out_node: rename(&link.out_node),
            out_port: link.out_port.clone(),
            in_node: rename(&link.in_node),
            in_port: link.in_port.clone(),
        };
        if link.out_node.type_name == incorrect {
            rewritten.out_port = fit_port(
                &rewritten.out_port,
                &spec.output_names,
                spec.output_types.as_deref(),
                consumer_input_type(link, base),
            )?;
        }
        if link.in_node.type_name == incorrect {
            rewritten.in_port = fit_port(
                &rewritten.in_port,
                &spec.input_names,
                spec.input_types.as_deref(),
                producer_output_type(link, base),
            )?;
        }
        links.push(rewritten);
    }
    WorkflowDiagram::new(links).map_err(|_| UnresolvedReason::PortMismatch)
}

/// Declared type of the link's destination input, when its spec is known.
fn consumer_input_type(link: &Link, base: &NodeBase) -> Option<String> {
    base.lookup(&link.in_node.type_name)?
        .input_type(link.in_port.as_str())
        .map(str::to_string)
}

/// Declared type of the link's source output, when its spec is known.
fn producer_output_type(link: &Link, base: &NodeBase) -> Option<String> {
    base.lookup(&link.out_node.type_name)?
        .output_type(link.out_port.as_str())
        .map(str::to_string)
}

/// Keeps a port that the spec declares; otherwise re-maps by unique
/// case-insensitive name match, then by unique type match when type
/// information is available on both sides.
fn fit_port(
    port: &PortName,
    names: &[PortName],
    types: Option<&[String]>,
    opposite_type: Option<String>,
) -> Result<PortName, UnresolvedReason> {
    if names.iter().any(|n| n == port) {
        return Ok(port.clone());
    }
    let ci: Vec<&PortName> = names
        .iter()
        .filter(|n| n.as_str().eq_ignore_ascii_case(port.as_str()))
        .collect();
    if let [unique] = ci.as_slice() {
        return Ok((*unique).clone());
    }
    if let (Some(types), Some(want)) = (types, opposite_type) {
        let matching: Vec<&PortName> = names
            .iter()
            .zip(types)
            .filter(|(_, t)| **t == want)
            .map(|(n, _)| n)
            .collect();
        if let [unique] = matching.as_slice() {
            return Ok((*unique).clone());
        }
    }
    Err(UnresolvedReason::PortMismatch)
}
