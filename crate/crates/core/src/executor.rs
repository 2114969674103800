//! Lifts diagrams back to full workflow graphs, statically validates
//! executability, and submits workflows to a ComfyUI server.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use thiserror::Error;

use crate::ir::{
    GraphLink, GraphNode, GraphWorkflow, InputSlot, NodeRef, OutputSlot, WorkflowDiagram,
};
use crate::nodebase::{NodeBase, NodeSpec};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("node type \"{0}\" is not in the node base")]
    NodeUnknown(String),
    #[error("port \"{port}\" is not declared on \"{node}\"")]
    PortUnknown { node: String, port: String },
    #[error("a workflow must contain at least one node")]
    EmptyDiagram,
    #[error("workflow failed validation: {0}")]
    InvalidWorkflow(String),
    #[error("server transport error: {0}")]
    Transport(String),
}

// ---------------------------------------------------------------------------
// lift
// ---------------------------------------------------------------------------

/// Converts a diagram to a full graph using the node base's specs.
///
/// Node ids are assigned 1..N following first appearance in the link
/// list, except that same-type nodes are ordered by their ordinal so the
/// diagram/graph round trip is exact. Widget values are filled from spec
/// defaults positionally over unfilled input slots.
pub fn lift(diagram: &WorkflowDiagram, base: &NodeBase) -> Result<GraphWorkflow, ExecError> {
    if diagram.is_empty() {
        return Err(ExecError::EmptyDiagram);
    }

    // Distinct refs in first-appearance order.
    let mut order: Vec<&NodeRef> = Vec::new();
    let mut seen: BTreeSet<&NodeRef> = BTreeSet::new();
    for link in diagram.links() {
        for node in [&link.out_node, &link.in_node] {
            if seen.insert(node) {
                order.push(node);
            }
        }
    }
    // Within one type, ids must ascend with the ordinal: reorder the
    // positions each type occupies.
    let mut positions_by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (pos, node) in order.iter().enumerate() {
        positions_by_type
            .entry(node.type_name.as_str())
            .or_default()
            .push(pos);
    }
    let mut ordered = order.clone();
    for positions in positions_by_type.values() {
        let mut refs: Vec<&NodeRef> = positions.iter().map(|&p| order[p]).collect();
        refs.sort_by_key(|r| r.ordinal);
        for (&pos, node) in positions.iter().zip(refs) {
            ordered[pos] = node;
        }
    }

    let mut graph = GraphWorkflow::default();
    let mut id_of: BTreeMap<&NodeRef, u64> = BTreeMap::new();
    for (i, node_ref) in ordered.iter().enumerate() {
        let spec = base
            .lookup(&node_ref.type_name)
            .ok_or_else(|| ExecError::NodeUnknown(node_ref.type_name.clone()))?;
        let id = (i + 1) as u64;
        id_of.insert(node_ref, id);
        graph.nodes.push(node_from_spec(id, spec));
    }

    for (i, link) in diagram.links().iter().enumerate() {
        let link_id = (i + 1) as u64;
        let src_id = id_of[&link.out_node];
        let dst_id = id_of[&link.in_node];
        let src_spec = base.lookup(&link.out_node.type_name).expect("checked above");
        let dst_spec = base.lookup(&link.in_node.type_name).expect("checked above");
        let src_slot = src_spec
            .output_index(link.out_port.as_str())
            .ok_or_else(|| ExecError::PortUnknown {
                node: link.out_node.render(),
                port: link.out_port.as_str().to_string(),
            })?;
        let dst_slot = dst_spec
            .input_index(link.in_port.as_str())
            .ok_or_else(|| ExecError::PortUnknown {
                node: link.in_node.render(),
                port: link.in_port.as_str().to_string(),
            })?;
        let value_type = graph
            .node(src_id)
            .and_then(|n| n.outputs.get(src_slot))
            .map(|s| s.value_type.clone())
            .unwrap_or_else(|| "*".into());
        graph.links.push(GraphLink {
            id: link_id,
            src_node_id: src_id,
            src_slot,
            dst_node_id: dst_id,
            dst_slot,
            value_type,
        });
        graph
            .node_mut(src_id)
            .expect("node exists")
            .outputs[src_slot]
            .outgoing_link_ids
            .push(link_id);
        graph
            .node_mut(dst_id)
            .expect("node exists")
            .inputs[dst_slot]
            .incoming_link_id = Some(link_id);
    }

    // Widget defaults map positionally onto the unfilled input slots.
    for node in &mut graph.nodes {
        let spec = base.lookup(&node.type_name).expect("checked above");
        let mut widgets: Vec<Value> = Vec::new();
        for slot in &node.inputs {
            if slot.incoming_link_id.is_none() {
                widgets.push(spec.default_for(&slot.name).cloned().unwrap_or(Value::Null));
            }
        }
        while widgets.last() == Some(&Value::Null) {
            widgets.pop();
        }
        node.widget_values = widgets;
    }

    debug_assert!(graph.check_invariants().is_ok());
    Ok(graph)
}

fn node_from_spec(id: u64, spec: &NodeSpec) -> GraphNode {
    let mut node = GraphNode::new(id, &spec.node_name);
    for (i, name) in spec.input_names.iter().enumerate() {
        node.inputs.push(InputSlot {
            name: name.as_str().to_string(),
            value_type: spec
                .input_types
                .as_ref()
                .map(|t| t[i].clone())
                .unwrap_or_else(|| "*".into()),
            incoming_link_id: None,
            extra: Map::new(),
        });
    }
    for (i, name) in spec.output_names.iter().enumerate() {
        node.outputs.push(OutputSlot {
            name: name.as_str().to_string(),
            value_type: spec
                .output_types
                .as_ref()
                .map(|t| t[i].clone())
                .unwrap_or_else(|| "*".into()),
            outgoing_link_ids: Vec::new(),
            extra: Map::new(),
        });
    }
    node
}

// ---------------------------------------------------------------------------
// validate_executable
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IssueCode {
    NodeUnknown,
    MissingRequiredInput,
    TypeMismatch,
    CycleDetected,
    DuplicateInputSlot,
    PortUnknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: IssueCode,
    /// Node ref or link rendering the issue is about.
    pub subject: String,
    pub message: String,
}

/// Outcome of static executability validation. `valid` is true iff
/// `issues` is empty; issues are sorted by code then subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    fn from_issues(mut issues: Vec<Issue>) -> Self {
        issues.sort_by(|a, b| {
            a.code
                .cmp(&b.code)
                .then_with(|| a.subject.cmp(&b.subject))
                .then_with(|| a.message.cmp(&b.message))
        });
        ValidationReport {
            valid: issues.is_empty(),
            issues,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidateOptions {
    /// Flag links whose endpoint types are unknown instead of skipping
    /// them.
    pub strict_types: bool,
}

/// Diagram-style rendering (`Type_ordinal`) for every node, ordinals by
/// ascending node id per type.
fn node_renderings(g: &GraphWorkflow) -> BTreeMap<u64, String> {
    let mut by_type: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for node in &g.nodes {
        by_type.entry(node.type_name.as_str()).or_default().push(node.id);
    }
    let mut out = BTreeMap::new();
    for (type_name, mut ids) in by_type {
        ids.sort_unstable();
        for (i, id) in ids.iter().enumerate() {
            out.insert(*id, format!("{type_name}_{i}"));
        }
    }
    out
}

fn type_known(t: &str) -> bool {
    !t.is_empty() && t != "*"
}

/// Static executability checks against the node base: unknown node
/// types, unsatisfied required inputs, link type consistency, cycles,
/// duplicate input producers, and ports absent from the specs.
pub fn validate_executable(g: &GraphWorkflow, base: &NodeBase) -> ValidationReport {
    validate_executable_with(g, base, ValidateOptions::default())
}

pub fn validate_executable_with(
    g: &GraphWorkflow,
    base: &NodeBase,
    opts: ValidateOptions,
) -> ValidationReport {
    let names = node_renderings(g);
    let render = |id: u64| names.get(&id).cloned().unwrap_or_else(|| format!("#{id}"));
    let mut issues = Vec::new();

    for node in &g.nodes {
        let Some(spec) = base.lookup(&node.type_name) else {
            issues.push(Issue {
                code: IssueCode::NodeUnknown,
                subject: render(node.id),
                message: format!("type \"{}\" is not in the node base", node.type_name),
            });
            continue;
        };
        // Ports present on the graph node but absent from the spec.
        for slot in &node.inputs {
            if spec.input_index(&slot.name).is_none() {
                issues.push(Issue {
                    code: IssueCode::PortUnknown,
                    subject: format!("{}/{}", render(node.id), slot.name),
                    message: format!(
                        "input \"{}\" is not declared by spec \"{}\"",
                        slot.name, node.type_name
                    ),
                });
            }
        }
        for slot in &node.outputs {
            if spec.output_index(&slot.name).is_none() {
                issues.push(Issue {
                    code: IssueCode::PortUnknown,
                    subject: format!("{}/{}", render(node.id), slot.name),
                    message: format!(
                        "output \"{}\" is not declared by spec \"{}\"",
                        slot.name, node.type_name
                    ),
                });
            }
        }
        // Required inputs need a link or a widget value.
        let unfilled_values = widget_assignment(node);
        for slot in &node.inputs {
            if !spec.is_required(&slot.name) || slot.incoming_link_id.is_some() {
                continue;
            }
            let has_widget = unfilled_values
                .get(slot.name.as_str())
                .map(|v| !v.is_null())
                .unwrap_or(false);
            if !has_widget && spec.default_for(&slot.name).is_none() {
                issues.push(Issue {
                    code: IssueCode::MissingRequiredInput,
                    subject: format!("{}/{}", render(node.id), slot.name),
                    message: "required input has no incoming link and no widget default".into(),
                });
            }
        }
    }

    // Duplicate producers for one input slot.
    let mut seen_inputs: BTreeSet<(u64, usize)> = BTreeSet::new();
    for link in &g.links {
        if !seen_inputs.insert((link.dst_node_id, link.dst_slot)) {
            let port = g
                .node(link.dst_node_id)
                .and_then(|n| n.inputs.get(link.dst_slot))
                .map(|s| s.name.clone())
                .unwrap_or_default();
            issues.push(Issue {
                code: IssueCode::DuplicateInputSlot,
                subject: format!("{}/{}", render(link.dst_node_id), port),
                message: "input slot has more than one producer".into(),
            });
        }
    }

    // Link type consistency: source output type vs destination input type.
    for link in &g.links {
        let src_type = g
            .node(link.src_node_id)
            .and_then(|n| n.outputs.get(link.src_slot))
            .map(|s| s.value_type.clone())
            .filter(|t| type_known(t))
            .or_else(|| Some(link.value_type.clone()).filter(|t| type_known(t)));
        let dst_type = g
            .node(link.dst_node_id)
            .and_then(|n| n.inputs.get(link.dst_slot))
            .map(|s| s.value_type.clone())
            .filter(|t| type_known(t));
        let subject = || {
            format!(
                "{} -> {}",
                render(link.src_node_id),
                render(link.dst_node_id)
            )
        };
        match (src_type, dst_type) {
            (Some(s), Some(d)) if s != d => issues.push(Issue {
                code: IssueCode::TypeMismatch,
                subject: subject(),
                message: format!("output type \"{s}\" wired into input type \"{d}\""),
            }),
            (None, _) | (_, None) if opts.strict_types => issues.push(Issue {
                code: IssueCode::TypeMismatch,
                subject: subject(),
                message: "link endpoint type is unknown under strict typing".into(),
            }),
            _ => {}
        }
    }

    // Cycle detection over the directed link graph (Kahn's algorithm).
    if let Some(cycle_nodes) = find_cycle_nodes(g) {
        let subject = cycle_nodes
            .iter()
            .map(|id| render(*id))
            .collect::<Vec<_>>()
            .join(" -> ");
        issues.push(Issue {
            code: IssueCode::CycleDetected,
            subject,
            message: "workflow links form a directed cycle".into(),
        });
    }

    ValidationReport::from_issues(issues)
}

/// Nodes left unresolved by topological elimination, ascending by id;
/// `None` when the graph is acyclic.
fn find_cycle_nodes(g: &GraphWorkflow) -> Option<Vec<u64>> {
    let mut indegree: BTreeMap<u64, usize> = g.nodes.iter().map(|n| (n.id, 0)).collect();
    let mut outgoing: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for link in &g.links {
        if let Some(d) = indegree.get_mut(&link.dst_node_id) {
            *d += 1;
        }
        outgoing.entry(link.src_node_id).or_default().push(link.dst_node_id);
    }
    let mut queue: Vec<u64> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| id)
        .collect();
    let mut resolved = 0usize;
    while let Some(id) = queue.pop() {
        resolved += 1;
        for dst in outgoing.get(&id).cloned().unwrap_or_default() {
            if let Some(d) = indegree.get_mut(&dst) {
                *d -= 1;
                if *d == 0 {
                    queue.push(dst);
                }
            }
        }
        indegree.remove(&id);
    }
    if resolved == g.nodes.len() {
        None
    } else {
        Some(indegree.keys().copied().collect())
    }
}

// ---------------------------------------------------------------------------
// to_api_format
// ---------------------------------------------------------------------------

/// Widget values zipped positionally onto the node's unfilled inputs.
fn widget_assignment(node: &GraphNode) -> BTreeMap<&str, &Value> {
    let unfilled: Vec<&InputSlot> = node
        .inputs
        .iter()
        .filter(|s| s.incoming_link_id.is_none())
        .collect();
    unfilled
        .iter()
        .zip(&node.widget_values)
        .map(|(slot, value)| (slot.name.as_str(), value))
        .collect()
}

/// Emits the server prompt schema: an object keyed by node id, each
/// entry `{class_type, inputs}` where inputs map port names to widget
/// literals or `[src_node_id_as_string, src_slot_index]` references.
pub fn to_api_format(g: &GraphWorkflow) -> Result<Vec<u8>, ExecError> {
    g.check_invariants()
        .map_err(|e| ExecError::InvalidWorkflow(e.to_string()))?;
    if g.nodes.is_empty() {
        return Err(ExecError::InvalidWorkflow("workflow has no nodes".into()));
    }
    if find_cycle_nodes(g).is_some() {
        return Err(ExecError::InvalidWorkflow(
            "workflow links form a directed cycle".into(),
        ));
    }
    let link_index: BTreeMap<u64, &GraphLink> = g.links.iter().map(|l| (l.id, l)).collect();
    let mut root = Map::new();
    for node in &g.nodes {
        let widgets = widget_assignment(node);
        let mut inputs = Map::new();
        for slot in &node.inputs {
            match slot.incoming_link_id {
                Some(link_id) => {
                    let link = link_index[&link_id];
                    inputs.insert(
                        slot.name.clone(),
                        Value::Array(vec![
                            Value::String(link.src_node_id.to_string()),
                            Value::Number(Number::from(link.src_slot as u64)),
                        ]),
                    );
                }
                None => {
                    if let Some(value) = widgets.get(slot.name.as_str()) {
                        if !value.is_null() {
                            inputs.insert(slot.name.clone(), (*value).clone());
                        }
                    }
                }
            }
        }
        let mut entry = Map::new();
        entry.insert("class_type".into(), Value::String(node.type_name.clone()));
        entry.insert("inputs".into(), Value::Object(inputs));
        root.insert(node.id.to_string(), Value::Object(entry));
    }
    Ok(serde_json::to_vec(&Value::Object(root)).expect("api serialization is infallible"))
}

// ---------------------------------------------------------------------------
// submit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubmitOutcome {
    Accepted { prompt_id: String },
    Rejected { server_message: String },
}

/// HTTP client for a ComfyUI server's prompt endpoint.
#[derive(Debug, Clone)]
pub struct ServerClient {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl ServerClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, ExecError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ExecError::Transport(e.to_string()))?;
        Ok(ServerClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }

    fn post_prompt(&self, body: &Value) -> Result<reqwest::blocking::Response, ExecError> {
        self.client
            .post(format!("{}/prompt", self.base_url))
            .json(body)
            .send()
            .map_err(|e| ExecError::Transport(e.to_string()))
    }
}

/// Uploads the workflow in api format with a fresh client id.
/// Non-success responses are passed through verbatim as `Rejected`;
/// transport failures are retried once.
pub fn submit(g: &GraphWorkflow, server: &ServerClient) -> Result<SubmitOutcome, ExecError> {
    let api: Value = serde_json::from_slice(&to_api_format(g)?)
        .expect("api format emits valid json");
    let body = serde_json::json!({
        "prompt": api,
        "client_id": uuid::Uuid::new_v4().to_string(),
    });
    let response = match server.post_prompt(&body) {
        Ok(r) => r,
        Err(_) => server.post_prompt(&body)?,
    };
    let status = response.status();
    let text = response
        .text()
        .map_err(|e| ExecError::Transport(e.to_string()))?;
    if !status.is_success() {
        return Ok(SubmitOutcome::Rejected {
            server_message: text,
        });
    }
    #[derive(Deserialize)]
    struct PromptResponse {
        prompt_id: String,
    }
    match serde_json::from_str::<PromptResponse>(&text) {
        Ok(r) => Ok(SubmitOutcome::Accepted {
            prompt_id: r.prompt_id,
        }),
        Err(_) => Ok(SubmitOutcome::Rejected {
            server_message: text,
        }),
    }
}

/// Submits each workflow on a bounded pool of worker threads; results
/// come back in input order.
pub fn submit_batch(
    workflows: &[GraphWorkflow],
    server: &ServerClient,
    parallelism: usize,
) -> Vec<Result<SubmitOutcome, ExecError>> {
    crate::parallel_map(workflows, parallelism.max(1), |g| submit(g, server))
}
