//! Workflow cleaning and lowering: resolves implicit broadcasters,
//! splices out bypassed/muted and Reroute nodes, drops annotation nodes,
//! checks connectivity, and converts a cleaned graph to a diagram.

use serde::Serialize;
use thiserror::Error;

use crate::ir::{
    GraphLink, GraphWorkflow, IrError, Link, NodeMode, NodeRef, PortName, WorkflowDiagram,
};

#[derive(Debug, Error)]
pub enum ReformatError {
    #[error("ambiguous broadcast: {count} broadcast channels provide type \"{value_type}\"")]
    AmbiguousBroadcast { value_type: String, count: usize },
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("slot {slot} on node {node} has no port name")]
    UnnamedPort { node: String, slot: String },
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// Stage toggles plus the type-name lists that drive node recognition.
#[derive(Debug, Clone)]
pub struct CleaningOptions {
    pub drop_note_nodes: bool,
    pub splice_reroute: bool,
    pub resolve_broadcasters: bool,
    pub splice_bypass: bool,
    pub require_connected: bool,
    /// Record rejections in the report instead of returning an error.
    pub lenient: bool,
    pub note_types: Vec<String>,
    pub reroute_types: Vec<String>,
    pub broadcaster_types: Vec<String>,
}

impl Default for CleaningOptions {
    fn default() -> Self {
        CleaningOptions {
            drop_note_nodes: true,
            splice_reroute: true,
            resolve_broadcasters: true,
            splice_bypass: true,
            require_connected: true,
            lenient: true,
            note_types: vec!["Note".into(), "MarkdownNote".into()],
            reroute_types: vec!["Reroute".into(), "Reroute (rgthree)".into()],
            broadcaster_types: vec![
                "Anything Everywhere".into(),
                "Anything Everywhere?".into(),
                "Anything Everywhere3".into(),
                "Prompts Everywhere".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    Note,
    Reroute,
    Broadcaster,
    Bypass,
    Mute,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemovedNode {
    pub id: u64,
    pub type_name: String,
    pub reason: RemovalReason,
}

/// A downstream link that had to be dropped because the spliced-out node
/// had no type-compatible pass-through.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnsplicableBypass {
    pub node_id: u64,
    pub type_name: String,
    pub dropped_link: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CleaningReport {
    pub removed_nodes: Vec<RemovedNode>,
    pub added_links: u64,
    pub spliced_links: u64,
    pub unsplicable: Vec<UnsplicableBypass>,
    pub rejected: Option<String>,
}

impl CleaningReport {
    pub fn is_identity(&self) -> bool {
        self.removed_nodes.is_empty()
            && self.added_links == 0
            && self.spliced_links == 0
            && self.unsplicable.is_empty()
            && self.rejected.is_none()
    }
}

// ---------------------------------------------------------------------------
// Link/node surgery
// ---------------------------------------------------------------------------

fn add_link(
    g: &mut GraphWorkflow,
    src_node_id: u64,
    src_slot: usize,
    dst_node_id: u64,
    dst_slot: usize,
    value_type: String,
) -> u64 {
    let id = g.next_link_id();
    g.links.push(GraphLink {
        id,
        src_node_id,
        src_slot,
        dst_node_id,
        dst_slot,
        value_type,
    });
    if let Some(n) = g.node_mut(src_node_id) {
        n.outputs[src_slot].outgoing_link_ids.push(id);
    }
    if let Some(n) = g.node_mut(dst_node_id) {
        n.inputs[dst_slot].incoming_link_id = Some(id);
    }
    id
}

fn remove_link(g: &mut GraphWorkflow, link_id: u64) {
    let Some(pos) = g.links.iter().position(|l| l.id == link_id) else {
        return;
    };
    let link = g.links.remove(pos);
    if let Some(n) = g.node_mut(link.src_node_id) {
        if let Some(slot) = n.outputs.get_mut(link.src_slot) {
            slot.outgoing_link_ids.retain(|id| *id != link_id);
        }
    }
    if let Some(n) = g.node_mut(link.dst_node_id) {
        if let Some(slot) = n.inputs.get_mut(link.dst_slot) {
            if slot.incoming_link_id == Some(link_id) {
                slot.incoming_link_id = None;
            }
        }
    }
}

fn remove_node(g: &mut GraphWorkflow, node_id: u64) {
    let incident: Vec<u64> = g
        .links
        .iter()
        .filter(|l| l.src_node_id == node_id || l.dst_node_id == node_id)
        .map(|l| l.id)
        .collect();
    for id in incident {
        remove_link(g, id);
    }
    g.nodes.retain(|n| n.id != node_id);
}

/// The concrete type a link carries: the link's own type unless it is a
/// wildcard, in which case the source output slot's declared type.
fn effective_link_type(g: &GraphWorkflow, link: &GraphLink) -> String {
    if link.value_type != "*" && !link.value_type.is_empty() {
        return link.value_type.clone();
    }
    g.node(link.src_node_id)
        .and_then(|n| n.outputs.get(link.src_slot))
        .map(|s| s.value_type.clone())
        .unwrap_or_else(|| link.value_type.clone())
}

fn node_ref_rendering(g: &GraphWorkflow, node_id: u64) -> String {
    match g.node(node_id) {
        Some(n) => format!("{}#{}", n.type_name, n.id),
        None => format!("#{node_id}"),
    }
}

fn link_rendering(g: &GraphWorkflow, link: &GraphLink) -> String {
    format!(
        "{} -> {} ({})",
        node_ref_rendering(g, link.src_node_id),
        node_ref_rendering(g, link.dst_node_id),
        link.value_type
    )
}

/// Removes `node_id` from the graph; each downstream link is reconnected
/// to the unique incoming producer of the same value type when one
/// exists, otherwise dropped and reported.
fn splice_out_node(g: &mut GraphWorkflow, node_id: u64, report: &mut CleaningReport) {
    let type_name = g
        .node(node_id)
        .map(|n| n.type_name.clone())
        .unwrap_or_default();
    let mut outgoing: Vec<GraphLink> = g
        .links
        .iter()
        .filter(|l| l.src_node_id == node_id)
        .cloned()
        .collect();
    outgoing.sort_by_key(|l| l.id);
    for l_out in outgoing {
        let out_type = effective_link_type(g, &l_out);
        let matching: Vec<GraphLink> = g
            .links
            .iter()
            .filter(|l| l.dst_node_id == node_id)
            .filter(|l| effective_link_type(g, l) == out_type)
            .cloned()
            .collect();
        let rendering = link_rendering(g, &l_out);
        remove_link(g, l_out.id);
        if let [producer] = matching.as_slice() {
            add_link(
                g,
                producer.src_node_id,
                producer.src_slot,
                l_out.dst_node_id,
                l_out.dst_slot,
                out_type,
            );
            report.spliced_links += 1;
        } else {
            report.unsplicable.push(UnsplicableBypass {
                node_id,
                type_name: type_name.clone(),
                dropped_link: rendering,
            });
        }
    }
    remove_node(g, node_id);
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

/// An input slot counts as fillable when it has no incoming link and no
/// widget binding.
fn is_unfilled(slot: &crate::ir::InputSlot) -> bool {
    slot.incoming_link_id.is_none() && !slot.extra.contains_key("widget")
}

fn resolve_broadcasters_inner(
    g: &mut GraphWorkflow,
    broadcaster_types: &[String],
    report: &mut CleaningReport,
) -> Result<(), ReformatError> {
    let broadcaster_ids: Vec<u64> = g
        .nodes
        .iter()
        .filter(|n| broadcaster_types.contains(&n.type_name))
        .map(|n| n.id)
        .collect();
    if broadcaster_ids.is_empty() {
        return Ok(());
    }

    // Each link feeding a broadcaster is one broadcast channel: the
    // original producer becomes the explicit source for matching inputs.
    let mut channels: Vec<(u64, usize, String)> = Vec::new();
    for link in &g.links {
        if broadcaster_ids.contains(&link.dst_node_id) {
            channels.push((link.src_node_id, link.src_slot, effective_link_type(g, link)));
        }
    }

    let mut unfilled: Vec<(u64, usize, String)> = Vec::new();
    for node in &g.nodes {
        if broadcaster_ids.contains(&node.id) {
            continue;
        }
        for (idx, slot) in node.inputs.iter().enumerate() {
            if is_unfilled(slot) {
                unfilled.push((node.id, idx, slot.value_type.clone()));
            }
        }
    }

    for (node_id, slot_idx, value_type) in unfilled {
        let matching: Vec<&(u64, usize, String)> =
            channels.iter().filter(|(_, _, t)| *t == value_type).collect();
        match matching.as_slice() {
            [] => {}
            [(src, src_slot, t)] => {
                add_link(g, *src, *src_slot, node_id, slot_idx, t.clone());
                report.added_links += 1;
            }
            many => {
                return Err(ReformatError::AmbiguousBroadcast {
                    value_type,
                    count: many.len(),
                });
            }
        }
    }

    for id in broadcaster_ids {
        let type_name = g.node(id).map(|n| n.type_name.clone()).unwrap_or_default();
        remove_node(g, id);
        report.removed_nodes.push(RemovedNode {
            id,
            type_name,
            reason: RemovalReason::Broadcaster,
        });
    }
    Ok(())
}

/// Replaces every implicit broadcast with explicit links and removes the
/// broadcaster nodes. Two broadcast channels of the same value type with
/// a matching unfilled input anywhere is an error.
pub fn resolve_broadcasters(
    g: &GraphWorkflow,
    opts: &CleaningOptions,
) -> Result<(GraphWorkflow, CleaningReport), ReformatError> {
    let mut out = g.clone();
    let mut report = CleaningReport::default();
    resolve_broadcasters_inner(&mut out, &opts.broadcaster_types, &mut report)?;
    Ok((out, report))
}

fn splice_bypass_inner(g: &mut GraphWorkflow, report: &mut CleaningReport) {
    loop {
        let next = g
            .nodes
            .iter()
            .filter(|n| n.mode == NodeMode::Bypass || n.mode == NodeMode::Mute)
            .map(|n| n.id)
            .min();
        let Some(id) = next else { break };
        let node = g.node(id).expect("id taken from the node list");
        let (type_name, mode) = (node.type_name.clone(), node.mode);
        splice_out_node(g, id, report);
        report.removed_nodes.push(RemovedNode {
            id,
            type_name,
            reason: if mode == NodeMode::Mute {
                RemovalReason::Mute
            } else {
                RemovalReason::Bypass
            },
        });
    }
}

/// Splices out bypassed nodes. Muted nodes are treated the same way:
/// both are skipped by the executor.
pub fn splice_bypass(g: &GraphWorkflow) -> (GraphWorkflow, CleaningReport) {
    let mut out = g.clone();
    let mut report = CleaningReport::default();
    splice_bypass_inner(&mut out, &mut report);
    (out, report)
}

fn drop_notes_inner(g: &mut GraphWorkflow, note_types: &[String], report: &mut CleaningReport) {
    let ids: Vec<(u64, String)> = g
        .nodes
        .iter()
        .filter(|n| note_types.contains(&n.type_name))
        .map(|n| (n.id, n.type_name.clone()))
        .collect();
    for (id, type_name) in ids {
        remove_node(g, id);
        report.removed_nodes.push(RemovedNode {
            id,
            type_name,
            reason: RemovalReason::Note,
        });
    }
}

fn splice_reroutes_inner(
    g: &mut GraphWorkflow,
    reroute_types: &[String],
    report: &mut CleaningReport,
) {
    loop {
        let next = g
            .nodes
            .iter()
            .filter(|n| reroute_types.contains(&n.type_name))
            .map(|n| n.id)
            .min();
        let Some(id) = next else { break };
        let type_name = g.node(id).map(|n| n.type_name.clone()).unwrap_or_default();
        splice_out_node(g, id, report);
        report.removed_nodes.push(RemovedNode {
            id,
            type_name,
            reason: RemovalReason::Reroute,
        });
    }
}

/// Connectivity of the graph viewed as undirected over its links.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Connected,
    Disconnected { components: usize },
}

/// Minimal disjoint-set over node indices with path halving.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Returns `Connected` iff the graph forms exactly one undirected
/// component. Zero-node graphs are an error.
pub fn check_connected(g: &GraphWorkflow) -> Result<Connectivity, ReformatError> {
    if g.nodes.is_empty() {
        return Err(ReformatError::EmptyGraph);
    }
    let index: std::collections::BTreeMap<u64, usize> = g
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id, i))
        .collect();
    let mut dsu = UnionFind::new(g.nodes.len());
    for link in &g.links {
        if let (Some(&a), Some(&b)) = (index.get(&link.src_node_id), index.get(&link.dst_node_id))
        {
            dsu.union(a, b);
        }
    }
    let components = (0..g.nodes.len())
        .map(|i| dsu.find(i))
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if components == 1 {
        Ok(Connectivity::Connected)
    } else {
        Ok(Connectivity::Disconnected { components })
    }
}

/// Runs the enabled cleaning stages in order: broadcasters, bypass/mute,
/// notes, reroutes, connectivity. A rejection stops the pipeline; with
/// `lenient` it is recorded in the report, otherwise returned as an error.
pub fn clean(
    g: &GraphWorkflow,
    opts: &CleaningOptions,
) -> Result<(GraphWorkflow, CleaningReport), ReformatError> {
    let mut out = g.clone();
    let mut report = CleaningReport::default();

    if opts.resolve_broadcasters {
        if let Err(e) = resolve_broadcasters_inner(&mut out, &opts.broadcaster_types, &mut report)
        {
            if opts.lenient {
                report.rejected = Some(e.to_string());
                return Ok((out, report));
            }
            return Err(e);
        }
    }
    if opts.splice_bypass {
        splice_bypass_inner(&mut out, &mut report);
    }
    if opts.drop_note_nodes {
        drop_notes_inner(&mut out, &opts.note_types, &mut report);
    }
    if opts.splice_reroute {
        splice_reroutes_inner(&mut out, &opts.reroute_types, &mut report);
    }
    if opts.require_connected {
        match check_connected(&out) {
            Ok(Connectivity::Connected) => {}
            Ok(Connectivity::Disconnected { components }) => {
                let reason = format!("Disconnected({components})");
                if opts.lenient {
                    report.rejected = Some(reason);
                } else {
                    return Err(ReformatError::Ir(IrError::schema("/", reason)));
                }
            }
            Err(e) => {
                if opts.lenient {
                    report.rejected = Some(e.to_string());
                } else {
                    return Err(e);
                }
            }
        }
    }
    Ok((out, report))
}

/// Lowers a cleaned graph to a diagram: one link per graph link in
/// ascending link-id order, ordinals assigned per type name by ascending
/// node id starting at 0.
pub fn to_diagram(g: &GraphWorkflow) -> Result<WorkflowDiagram, ReformatError> {
    let mut by_type: std::collections::BTreeMap<&str, Vec<u64>> = std::collections::BTreeMap::new();
    for node in &g.nodes {
        by_type.entry(node.type_name.as_str()).or_default().push(node.id);
    }
    let mut ordinal: std::collections::BTreeMap<u64, u32> = std::collections::BTreeMap::new();
    for ids in by_type.values_mut() {
        ids.sort_unstable();
        for (i, id) in ids.iter().enumerate() {
            ordinal.insert(*id, i as u32);
        }
    }
    let node_ref = |id: u64| -> NodeRef {
        let node = g.node(id).expect("link endpoints checked by invariants");
        NodeRef {
            type_name: node.type_name.clone(),
            ordinal: ordinal[&id],
        }
    };
    let port = |node_id: u64, name: &str, slot: String| -> Result<PortName, ReformatError> {
        PortName::new(name).map_err(|_| ReformatError::UnnamedPort {
            node: node_ref_rendering(g, node_id),
            slot,
        })
    };

    let mut links: Vec<&GraphLink> = g.links.iter().collect();
    links.sort_by_key(|l| l.id);
    let mut out = Vec::with_capacity(links.len());
    for link in links {
        let src = g.node(link.src_node_id).ok_or_else(|| {
            IrError::schema("/links", format!("dangling src_node_id {}", link.src_node_id))
        })?;
        let dst = g.node(link.dst_node_id).ok_or_else(|| {
            IrError::schema("/links", format!("dangling dst_node_id {}", link.dst_node_id))
        })?;
        let out_slot = src.outputs.get(link.src_slot).ok_or_else(|| {
            IrError::schema("/links", format!("src_slot {} out of range", link.src_slot))
        })?;
        let in_slot = dst.inputs.get(link.dst_slot).ok_or_else(|| {
            IrError::schema("/links", format!("dst_slot {} out of range", link.dst_slot))
        })?;
        out.push(Link {
            out_node: node_ref(link.src_node_id),
            out_port: port(src.id, &out_slot.name, format!("outputs/{}", link.src_slot))?,
            in_node: node_ref(link.dst_node_id),
            in_port: port(dst.id, &in_slot.name, format!("inputs/{}", link.dst_slot))?,
        });
    }
    Ok(WorkflowDiagram::new(out)?)
}
