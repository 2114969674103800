//! Full workflow graph in the ComfyUI export schema: node objects plus a
//! table of 6-element link arrays. Unknown keys at every level are kept in
//! `extra` maps so that cleaning never destroys metadata.

use serde_json::{Map, Number, Value};

use super::IrError;

/// Execution mode of a node. Mute and bypass nodes are skipped by the
/// ComfyUI executor; the cleaning pipeline splices them out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NodeMode {
    #[default]
    Normal,
    Mute,
    Bypass,
}

impl NodeMode {
    /// Public ComfyUI convention: 0 always, 2 mute, 4 bypass. Event modes
    /// (1, 3) are treated as normal.
    fn from_code(code: u64) -> Option<NodeMode> {
        match code {
            0 | 1 | 3 => Some(NodeMode::Normal),
            2 => Some(NodeMode::Mute),
            4 => Some(NodeMode::Bypass),
            _ => None,
        }
    }

    fn code(self) -> u64 {
        match self {
            NodeMode::Normal => 0,
            NodeMode::Mute => 2,
            NodeMode::Bypass => 4,
        }
    }
}

/// An input slot on a graph node. The name may be empty for cosmetic
/// nodes such as Reroute; diagrams require named ports.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InputSlot {
    pub name: String,
    pub value_type: String,
    pub incoming_link_id: Option<u64>,
    pub extra: Map<String, Value>,
}

/// An output slot on a graph node, fanning out to zero or more links.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutputSlot {
    pub name: String,
    pub value_type: String,
    pub outgoing_link_ids: Vec<u64>,
    pub extra: Map<String, Value>,
}

/// One node of a workflow graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: u64,
    pub type_name: String,
    pub mode: NodeMode,
    pub inputs: Vec<InputSlot>,
    pub outputs: Vec<OutputSlot>,
    pub widget_values: Vec<Value>,
    pub extra: Map<String, Value>,
}

impl GraphNode {
    pub fn new(id: u64, type_name: impl Into<String>) -> Self {
        GraphNode {
            id,
            type_name: type_name.into(),
            mode: NodeMode::Normal,
            inputs: Vec::new(),
            outputs: Vec::new(),
            widget_values: Vec::new(),
            extra: Map::new(),
        }
    }
}

/// One edge of the link table: source node/slot to destination node/slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphLink {
    pub id: u64,
    pub src_node_id: u64,
    pub src_slot: usize,
    pub dst_node_id: u64,
    pub dst_slot: usize,
    pub value_type: String,
}

/// A complete workflow graph. Top-level keys other than `nodes` and
/// `links` are preserved opaquely in `extra`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphWorkflow {
    pub nodes: Vec<GraphNode>,
    pub links: Vec<GraphLink>,
    pub extra: Map<String, Value>,
}

/// Wildcard value type used by pass-through nodes; compatible with any type.
pub(crate) const WILDCARD_TYPE: &str = "*";

pub(crate) fn types_compatible(a: &str, b: &str) -> bool {
    a == b || a == WILDCARD_TYPE || b == WILDCARD_TYPE || a.is_empty() || b.is_empty()
}

impl GraphWorkflow {
    pub fn node(&self, id: u64) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: u64) -> Option<&mut GraphNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn link(&self, id: u64) -> Option<&GraphLink> {
        self.links.iter().find(|l| l.id == id)
    }

    pub fn next_link_id(&self) -> u64 {
        self.links.iter().map(|l| l.id).max().unwrap_or(0) + 1
    }

    /// Checks every structural invariant: unique ids, resolvable and
    /// in-range link endpoints, slot/link cross-references consistent in
    /// both directions, link types matching the source output slot, and
    /// unique slot names per node.
    pub fn check_invariants(&self) -> Result<(), IrError> {
        let mut node_index = std::collections::BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id == 0 {
                return Err(IrError::schema(format!("/nodes/{i}/id"), "node id must be positive"));
            }
            if node_index.insert(node.id, node).is_some() {
                return Err(IrError::schema(
                    format!("/nodes/{i}/id"),
                    format!("duplicate node id {}", node.id),
                ));
            }
            let mut names = std::collections::BTreeSet::new();
            for (j, slot) in node.inputs.iter().enumerate() {
                if !names.insert(slot.name.as_str()) {
                    return Err(IrError::schema(
                        format!("/nodes/{i}/inputs/{j}/name"),
                        format!("duplicate input name \"{}\"", slot.name),
                    ));
                }
            }
            names.clear();
            for (j, slot) in node.outputs.iter().enumerate() {
                if !names.insert(slot.name.as_str()) {
                    return Err(IrError::schema(
                        format!("/nodes/{i}/outputs/{j}/name"),
                        format!("duplicate output name \"{}\"", slot.name),
                    ));
                }
            }
        }

        let mut link_index = std::collections::BTreeMap::new();
        for (i, link) in self.links.iter().enumerate() {
            let path = format!("/links/{i}");
            if link.id == 0 {
                return Err(IrError::schema(path, "link id must be positive"));
            }
            if link_index.insert(link.id, link).is_some() {
                return Err(IrError::schema(path, format!("duplicate link id {}", link.id)));
            }
            let src = node_index.get(&link.src_node_id).ok_or_else(|| {
                IrError::schema(&path, format!("dangling src_node_id {}", link.src_node_id))
            })?;
            let dst = node_index.get(&link.dst_node_id).ok_or_else(|| {
                IrError::schema(&path, format!("dangling dst_node_id {}", link.dst_node_id))
            })?;
            let out_slot = src.outputs.get(link.src_slot).ok_or_else(|| {
                IrError::schema(&path, format!("src_slot {} out of range", link.src_slot))
            })?;
            let in_slot = dst.inputs.get(link.dst_slot).ok_or_else(|| {
                IrError::schema(&path, format!("dst_slot {} out of range", link.dst_slot))
            })?;
            if !types_compatible(&link.value_type, &out_slot.value_type) {
                return Err(IrError::schema(
                    &path,
                    format!(
                        "link type \"{}\" does not match source output type \"{}\"",
                        link.value_type, out_slot.value_type
                    ),
                ));
            }
            if !out_slot.outgoing_link_ids.contains(&link.id) {
                return Err(IrError::schema(
                    &path,
                    format!("source output slot does not list link {}", link.id),
                ));
            }
            if in_slot.incoming_link_id != Some(link.id) {
                return Err(IrError::schema(
                    &path,
                    format!("destination input slot does not record link {}", link.id),
                ));
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            for (j, slot) in node.inputs.iter().enumerate() {
                if let Some(id) = slot.incoming_link_id {
                    let link = link_index.get(&id).ok_or_else(|| {
                        IrError::schema(
                            format!("/nodes/{i}/inputs/{j}/link"),
                            format!("references missing link {id}"),
                        )
                    })?;
                    if link.dst_node_id != node.id || link.dst_slot != j {
                        return Err(IrError::schema(
                            format!("/nodes/{i}/inputs/{j}/link"),
                            format!("link {id} does not terminate at this slot"),
                        ));
                    }
                }
            }
            for (j, slot) in node.outputs.iter().enumerate() {
                for id in &slot.outgoing_link_ids {
                    let link = link_index.get(id).ok_or_else(|| {
                        IrError::schema(
                            format!("/nodes/{i}/outputs/{j}/links"),
                            format!("references missing link {id}"),
                        )
                    })?;
                    if link.src_node_id != node.id || link.src_slot != j {
                        return Err(IrError::schema(
                            format!("/nodes/{i}/outputs/{j}/links"),
                            format!("link {id} does not originate at this slot"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn get_u64(obj: &Map<String, Value>, key: &str, path: &str) -> Result<u64, IrError> {
    obj.get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| IrError::schema(format!("{path}/{key}"), "expected a non-negative integer"))
}

fn get_str<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a str, IrError> {
    obj.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| IrError::schema(format!("{path}/{key}"), "expected a string"))
}

fn opt_type(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, IrError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(WILDCARD_TYPE.to_string()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(IrError::schema(
            format!("{path}/{key}"),
            "expected a string or null",
        )),
    }
}

fn parse_input_slot(value: &Value, path: &str) -> Result<InputSlot, IrError> {
    let obj = value
        .as_object()
        .ok_or_else(|| IrError::schema(path, "expected an input slot object"))?;
    let incoming_link_id = match obj.get("link") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| {
            IrError::schema(format!("{path}/link"), "expected a link id or null")
        })?),
    };
    let mut extra = obj.clone();
    extra.remove("name");
    extra.remove("type");
    extra.remove("link");
    Ok(InputSlot {
        name: get_str(obj, "name", path)?.to_string(),
        value_type: opt_type(obj, "type", path)?,
        incoming_link_id,
        extra,
    })
}

fn parse_output_slot(value: &Value, path: &str) -> Result<OutputSlot, IrError> {
    let obj = value
        .as_object()
        .ok_or_else(|| IrError::schema(path, "expected an output slot object"))?;
    let outgoing_link_ids = match obj.get("links") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(ids)) => ids
            .iter()
            .map(|v| {
                v.as_u64().ok_or_else(|| {
                    IrError::schema(format!("{path}/links"), "expected link ids")
                })
            })
            .collect::<Result<_, _>>()?,
        Some(_) => {
            return Err(IrError::schema(
                format!("{path}/links"),
                "expected an array of link ids or null",
            ))
        }
    };
    let mut extra = obj.clone();
    extra.remove("name");
    extra.remove("type");
    extra.remove("links");
    Ok(OutputSlot {
        name: get_str(obj, "name", path)?.to_string(),
        value_type: opt_type(obj, "type", path)?,
        outgoing_link_ids,
        extra,
    })
}

fn parse_node(value: &Value, path: &str) -> Result<GraphNode, IrError> {
    let obj = value
        .as_object()
        .ok_or_else(|| IrError::schema(path, "expected a node object"))?;
    let id = get_u64(obj, "id", path)?;
    if id == 0 {
        return Err(IrError::schema(format!("{path}/id"), "node id must be positive"));
    }
    let type_name = get_str(obj, "type", path)?.to_string();
    let mode = match obj.get("mode") {
        None => NodeMode::Normal,
        Some(v) => v
            .as_u64()
            .and_then(NodeMode::from_code)
            .ok_or_else(|| IrError::schema(format!("{path}/mode"), "unknown node mode"))?,
    };
    let mut inputs = Vec::new();
    if let Some(v) = obj.get("inputs") {
        let arr = v
            .as_array()
            .ok_or_else(|| IrError::schema(format!("{path}/inputs"), "expected an array"))?;
        for (j, slot) in arr.iter().enumerate() {
            inputs.push(parse_input_slot(slot, &format!("{path}/inputs/{j}"))?);
        }
    }
    let mut outputs = Vec::new();
    if let Some(v) = obj.get("outputs") {
        let arr = v
            .as_array()
            .ok_or_else(|| IrError::schema(format!("{path}/outputs"), "expected an array"))?;
        for (j, slot) in arr.iter().enumerate() {
            outputs.push(parse_output_slot(slot, &format!("{path}/outputs/{j}"))?);
        }
    }
    let widget_values = match obj.get("widgets_values") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(vs)) => vs.clone(),
        Some(_) => {
            return Err(IrError::schema(
                format!("{path}/widgets_values"),
                "expected an array",
            ))
        }
    };
    let mut extra = obj.clone();
    for key in ["id", "type", "mode", "inputs", "outputs", "widgets_values"] {
        extra.remove(key);
    }
    Ok(GraphNode {
        id,
        type_name,
        mode,
        inputs,
        outputs,
        widget_values,
        extra,
    })
}

fn parse_link(value: &Value, path: &str) -> Result<GraphLink, IrError> {
    let arr = match value.as_array() {
        Some(a) if a.len() == 6 => a,
        _ => return Err(IrError::schema(path, "expected a 6-element link array")),
    };
    let int = |idx: usize, what: &str| -> Result<u64, IrError> {
        arr[idx]
            .as_u64()
            .ok_or_else(|| IrError::schema(path, format!("{what} must be a non-negative integer")))
    };
    let value_type = match &arr[5] {
        Value::Null => WILDCARD_TYPE.to_string(),
        Value::String(s) => s.clone(),
        _ => return Err(IrError::schema(path, "link type must be a string or null")),
    };
    let id = int(0, "link id")?;
    if id == 0 {
        return Err(IrError::schema(path, "link id must be positive"));
    }
    Ok(GraphLink {
        id,
        src_node_id: int(1, "src_node_id")?,
        src_slot: int(2, "src_slot")? as usize,
        dst_node_id: int(3, "dst_node_id")?,
        dst_slot: int(4, "dst_slot")? as usize,
        value_type,
    })
}

/// Parses ComfyUI export-schema JSON into a [`GraphWorkflow`] whose
/// invariants all hold. Unknown top-level keys land in `extra`.
pub fn parse_graph_workflow(bytes: &[u8]) -> Result<GraphWorkflow, IrError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| IrError::MalformedJson(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| IrError::schema("/", "expected a top-level object"))?;
    let nodes_value = obj
        .get("nodes")
        .and_then(Value::as_array)
        .ok_or_else(|| IrError::schema("/nodes", "missing nodes array"))?;
    let links_value = obj
        .get("links")
        .and_then(Value::as_array)
        .ok_or_else(|| IrError::schema("/links", "missing links array"))?;

    let mut nodes = Vec::with_capacity(nodes_value.len());
    for (i, node) in nodes_value.iter().enumerate() {
        nodes.push(parse_node(node, &format!("/nodes/{i}"))?);
    }
    let mut links = Vec::with_capacity(links_value.len());
    for (i, link) in links_value.iter().enumerate() {
        links.push(parse_link(link, &format!("/links/{i}"))?);
    }
    let mut extra = obj.clone();
    extra.remove("nodes");
    extra.remove("links");

    let graph = GraphWorkflow { nodes, links, extra };
    graph.check_invariants()?;
    Ok(graph)
}

fn emit_input_slot(slot: &InputSlot) -> Value {
    let mut obj = Map::new();
    for (k, v) in &slot.extra {
        obj.insert(k.clone(), v.clone());
    }
    obj.insert("name".into(), Value::String(slot.name.clone()));
    obj.insert("type".into(), Value::String(slot.value_type.clone()));
    obj.insert(
        "link".into(),
        slot.incoming_link_id
            .map(|id| Value::Number(Number::from(id)))
            .unwrap_or(Value::Null),
    );
    Value::Object(obj)
}

fn emit_output_slot(slot: &OutputSlot) -> Value {
    let mut obj = Map::new();
    for (k, v) in &slot.extra {
        obj.insert(k.clone(), v.clone());
    }
    obj.insert("name".into(), Value::String(slot.name.clone()));
    obj.insert("type".into(), Value::String(slot.value_type.clone()));
    obj.insert(
        "links".into(),
        Value::Array(
            slot.outgoing_link_ids
                .iter()
                .map(|id| Value::Number(Number::from(*id)))
                .collect(),
        ),
    );
    Value::Object(obj)
}

fn emit_node(node: &GraphNode) -> Value {
    let mut obj = Map::new();
    for (k, v) in &node.extra {
        obj.insert(k.clone(), v.clone());
    }
    obj.insert("id".into(), Value::Number(Number::from(node.id)));
    obj.insert("type".into(), Value::String(node.type_name.clone()));
    obj.insert("mode".into(), Value::Number(Number::from(node.mode.code())));
    obj.insert(
        "inputs".into(),
        Value::Array(node.inputs.iter().map(emit_input_slot).collect()),
    );
    obj.insert(
        "outputs".into(),
        Value::Array(node.outputs.iter().map(emit_output_slot).collect()),
    );
    obj.insert(
        "widgets_values".into(),
        Value::Array(node.widget_values.clone()),
    );
    Value::Object(obj)
}

fn emit_link(link: &GraphLink) -> Value {
    Value::Array(vec![
        Value::Number(Number::from(link.id)),
        Value::Number(Number::from(link.src_node_id)),
        Value::Number(Number::from(link.src_slot as u64)),
        Value::Number(Number::from(link.dst_node_id)),
        Value::Number(Number::from(link.dst_slot as u64)),
        Value::String(link.value_type.clone()),
    ])
}

/// Serializes a workflow graph back to export-schema JSON bytes.
/// Deterministic: object keys are sorted and array order follows the
/// graph, so equal graphs emit identical bytes and
/// `parse_graph_workflow(emit_graph_workflow(g))` equals `g`.
pub fn emit_graph_workflow(graph: &GraphWorkflow) -> Vec<u8> {
    let mut root = Map::new();
    for (k, v) in &graph.extra {
        if k != "nodes" && k != "links" {
            root.insert(k.clone(), v.clone());
        }
    }
    root.insert(
        "nodes".into(),
        Value::Array(graph.nodes.iter().map(emit_node).collect()),
    );
    root.insert(
        "links".into(),
        Value::Array(graph.links.iter().map(emit_link).collect()),
    );
    serde_json::to_vec(&Value::Object(root)).expect("workflow serialization is infallible")
}
