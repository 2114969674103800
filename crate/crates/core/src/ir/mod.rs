//! Graph IR: the link-list diagram representation and the full ComfyUI
//! workflow graph, with deterministic JSON serialization for both.
//!
//! A diagram is an ordered list of 4-tuples
//! `[output_node, output_port, input_node, input_port]` where node tokens
//! carry an `_<ordinal>` suffix that distinguishes same-type nodes. The
//! graph form mirrors the ComfyUI export schema (node objects plus a table
//! of 6-element link arrays).

mod build;
mod graph;

pub use build::GraphBuilder;
pub use graph::{
    emit_graph_workflow, parse_graph_workflow, GraphLink, GraphNode, GraphWorkflow, InputSlot,
    NodeMode, OutputSlot,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Serialize, Serializer};
use thiserror::Error;

/// Errors produced while parsing or constructing IR values.
#[derive(Debug, Error)]
pub enum IrError {
    #[error("malformed json: {0}")]
    MalformedJson(String),
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("link entry at {path} is not a 4-array of strings")]
    BadLinkArity { path: String },
    #[error("input slot {node}/{port} has more than one producer")]
    DuplicateInputSlot { node: String, port: String },
    #[error("ordinals for node type \"{type_name}\" are not dense from 0")]
    NonDenseOrdinals { type_name: String },
    #[error("cannot parse node reference \"{token}\": expected <type_name>_<ordinal>")]
    BadNodeRef { token: String },
    #[error("invalid port name \"{name}\": {reason}")]
    InvalidPortName { name: String, reason: String },
}

impl IrError {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        IrError::SchemaViolation {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// A case-sensitive port name. Non-empty, no surrounding whitespace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, serde::Deserialize)]
#[serde(try_from = "String")]
#[serde(into = "String")]
pub struct PortName(String);

impl PortName {
    pub fn new(name: impl Into<String>) -> Result<Self, IrError> {
        let name = name.into();
        if name.is_empty() {
            return Err(IrError::InvalidPortName {
                name,
                reason: "must be non-empty".into(),
            });
        }
        if name.trim() != name {
            return Err(IrError::InvalidPortName {
                name,
                reason: "must not have leading or trailing whitespace".into(),
            });
        }
        Ok(PortName(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PortName {
    type Error = IrError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        PortName::new(value)
    }
}

impl From<PortName> for String {
    fn from(p: PortName) -> String {
        p.0
    }
}

impl fmt::Display for PortName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A node occurrence in a diagram: type name plus the ordinal that
/// distinguishes same-type nodes, rendered as `<type_name>_<ordinal>`.
///
/// Parsing takes the maximal trailing decimal run after the final
/// underscore, so `X_1_2` is type `X_1` with ordinal 2.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef {
    pub type_name: String,
    pub ordinal: u32,
}

impl NodeRef {
    pub fn new(type_name: impl Into<String>, ordinal: u32) -> Result<Self, IrError> {
        let type_name = type_name.into();
        if type_name.is_empty() {
            return Err(IrError::BadNodeRef {
                token: format!("_{ordinal}"),
            });
        }
        Ok(NodeRef { type_name, ordinal })
    }

    /// Parses the canonical `<type_name>_<ordinal>` rendering.
    pub fn parse(token: &str) -> Result<Self, IrError> {
        let bad = || IrError::BadNodeRef {
            token: token.to_string(),
        };
        let bytes = token.as_bytes();
        let mut digits_start = bytes.len();
        while digits_start > 0 && bytes[digits_start - 1].is_ascii_digit() {
            digits_start -= 1;
        }
        if digits_start == bytes.len() || digits_start < 2 || bytes[digits_start - 1] != b'_' {
            return Err(bad());
        }
        let ordinal: u32 = token[digits_start..].parse().map_err(|_| bad())?;
        Ok(NodeRef {
            type_name: token[..digits_start - 1].to_string(),
            ordinal,
        })
    }

    pub fn render(&self) -> String {
        format!("{}_{}", self.type_name, self.ordinal)
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.type_name, self.ordinal)
    }
}

/// One diagram link: a producer port wired into a consumer port.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Link {
    pub out_node: NodeRef,
    pub out_port: PortName,
    pub in_node: NodeRef,
    pub in_port: PortName,
}

impl Serialize for Link {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = serializer.serialize_seq(Some(4))?;
        seq.serialize_element(&self.out_node.render())?;
        seq.serialize_element(self.out_port.as_str())?;
        seq.serialize_element(&self.in_node.render())?;
        seq.serialize_element(self.in_port.as_str())?;
        seq.end()
    }
}

/// An ordered list of links. Construction enforces that every input slot
/// has at most one producer and that ordinals per type name are dense
/// (`0..count`).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WorkflowDiagram {
    links: Vec<Link>,
}

impl WorkflowDiagram {
    pub fn new(links: Vec<Link>) -> Result<Self, IrError> {
        let mut seen_inputs: BTreeSet<(&NodeRef, &PortName)> = BTreeSet::new();
        for link in &links {
            if !seen_inputs.insert((&link.in_node, &link.in_port)) {
                return Err(IrError::DuplicateInputSlot {
                    node: link.in_node.render(),
                    port: link.in_port.as_str().to_string(),
                });
            }
        }
        let mut ordinals: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
        for link in &links {
            for node in [&link.out_node, &link.in_node] {
                ordinals
                    .entry(node.type_name.as_str())
                    .or_default()
                    .insert(node.ordinal);
            }
        }
        for (type_name, seen) in ordinals {
            let dense = seen.len() as u32;
            if seen.iter().next_back().copied() != dense.checked_sub(1) {
                return Err(IrError::NonDenseOrdinals {
                    type_name: type_name.to_string(),
                });
            }
        }
        Ok(WorkflowDiagram { links })
    }

    pub fn empty() -> Self {
        WorkflowDiagram::default()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    /// Every node reference appearing in the diagram, deduplicated.
    pub fn node_refs(&self) -> BTreeSet<&NodeRef> {
        self.links
            .iter()
            .flat_map(|l| [&l.out_node, &l.in_node])
            .collect()
    }

    /// Distinct node type names, sorted.
    pub fn type_names(&self) -> BTreeSet<&str> {
        self.links
            .iter()
            .flat_map(|l| [l.out_node.type_name.as_str(), l.in_node.type_name.as_str()])
            .collect()
    }

    /// Link order is preserved for serialization, but two diagrams with the
    /// same links in different order describe the same workflow.
    pub fn eq_unordered(&self, other: &WorkflowDiagram) -> bool {
        let a: BTreeSet<&Link> = self.links.iter().collect();
        let b: BTreeSet<&Link> = other.links.iter().collect();
        a == b
    }
}

/// Parses a UTF-8 JSON array of `[out_node, out_port, in_node, in_port]`
/// string 4-arrays into a diagram.
pub fn parse_diagram(bytes: &[u8]) -> Result<WorkflowDiagram, IrError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| IrError::MalformedJson(e.to_string()))?;
    let entries = value
        .as_array()
        .ok_or_else(|| IrError::schema("/", "expected a top-level array of links"))?;
    let mut links = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let path = format!("/{i}");
        let tuple = match entry.as_array() {
            Some(t) if t.len() == 4 => t,
            _ => return Err(IrError::BadLinkArity { path }),
        };
        let mut fields = [""; 4];
        for (j, field) in tuple.iter().enumerate() {
            fields[j] = field
                .as_str()
                .ok_or_else(|| IrError::BadLinkArity { path: path.clone() })?;
        }
        links.push(Link {
            out_node: NodeRef::parse(fields[0])?,
            out_port: PortName::new(fields[1])?,
            in_node: NodeRef::parse(fields[2])?,
            in_port: PortName::new(fields[3])?,
        });
    }
    WorkflowDiagram::new(links)
}

/// Serializes a diagram to its canonical compact JSON bytes.
/// Deterministic: equal diagrams emit identical bytes.
pub fn emit_diagram(diagram: &WorkflowDiagram) -> Vec<u8> {
    serde_json::to_vec(&diagram.links).expect("diagram serialization is infallible")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(out: &str, out_port: &str, inp: &str, in_port: &str) -> Link {
        Link {
            out_node: NodeRef::parse(out).unwrap(),
            out_port: PortName::new(out_port).unwrap(),
            in_node: NodeRef::parse(inp).unwrap(),
            in_port: PortName::new(in_port).unwrap(),
        }
    }

    #[test]
    fn node_ref_parses_plain_suffix() {
        let r = NodeRef::parse("CLIP Text Encoder_0").unwrap();
        assert_eq!(r.type_name, "CLIP Text Encoder");
        assert_eq!(r.ordinal, 0);
    }

    #[test]
    fn node_ref_takes_final_underscore_run() {
        let r = NodeRef::parse("X_1_2").unwrap();
        assert_eq!(r.type_name, "X_1");
        assert_eq!(r.ordinal, 2);
        let r = NodeRef::parse("X_12").unwrap();
        assert_eq!(r.type_name, "X");
        assert_eq!(r.ordinal, 12);
    }

    #[test]
    fn node_ref_without_ordinal_is_rejected() {
        assert!(matches!(
            NodeRef::parse("KSampler"),
            Err(IrError::BadNodeRef { .. })
        ));
        assert!(NodeRef::parse("_7").is_err());
        assert!(NodeRef::parse("A_").is_err());
        assert!(NodeRef::parse("").is_err());
    }

    #[test]
    fn node_ref_render_parse_is_bijective() {
        for (name, ordinal) in [("KSampler", 0), ("easy imageSize", 3), ("X_1", 2)] {
            let r = NodeRef::new(name, ordinal).unwrap();
            assert_eq!(NodeRef::parse(&r.render()).unwrap(), r);
        }
    }

    #[test]
    fn node_ref_leading_zero_normalizes() {
        let r = NodeRef::parse("X_01").unwrap();
        assert_eq!((r.type_name.as_str(), r.ordinal), ("X", 1));
        assert_eq!(r.render(), "X_1");
    }

    #[test]
    fn port_name_rejects_empty_and_padded() {
        assert!(PortName::new("").is_err());
        assert!(PortName::new(" positive").is_err());
        assert!(PortName::new("positive ").is_err());
        assert!(PortName::new("width_int").is_ok());
    }

    #[test]
    fn parse_single_link_diagram() {
        let d =
            parse_diagram(br#"[["CLIP Text Encoder_0","CONDITIONING","KSampler_0","positive"]]"#)
                .unwrap();
        assert_eq!(d.len(), 1);
        let l = &d.links()[0];
        assert_eq!(l.out_node.render(), "CLIP Text Encoder_0");
        assert_eq!(l.out_port.as_str(), "CONDITIONING");
        assert_eq!(l.in_node.render(), "KSampler_0");
        assert_eq!(l.in_port.as_str(), "positive");
    }

    #[test]
    fn parse_empty_array_is_empty_diagram() {
        let d = parse_diagram(b"[]").unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn parse_rejects_three_element_entry() {
        let err = parse_diagram(br#"[["A_0","OUT","B_0"]]"#).unwrap_err();
        assert!(matches!(err, IrError::BadLinkArity { path } if path == "/0"));
    }

    #[test]
    fn parse_rejects_non_string_element() {
        let err = parse_diagram(br#"[["A_0","OUT","B_0",3]]"#).unwrap_err();
        assert!(matches!(err, IrError::BadLinkArity { .. }));
    }

    #[test]
    fn parse_rejects_duplicate_input_slot() {
        let err = parse_diagram(
            br#"[["A_0","OUT","C_0","x"],["B_0","OUT","C_0","x"]]"#,
        )
        .unwrap_err();
        assert!(
            matches!(err, IrError::DuplicateInputSlot { ref node, ref port } if node == "C_0" && port == "x")
        );
    }

    #[test]
    fn parse_rejects_non_dense_ordinals() {
        let err = parse_diagram(br#"[["A_1","OUT","B_0","x"]]"#).unwrap_err();
        assert!(matches!(err, IrError::NonDenseOrdinals { type_name } if type_name == "A"));
    }

    #[test]
    fn parse_rejects_malformed_json() {
        assert!(matches!(
            parse_diagram(b"[[").unwrap_err(),
            IrError::MalformedJson(_)
        ));
        assert!(matches!(
            parse_diagram(br#"{"a":1}"#).unwrap_err(),
            IrError::SchemaViolation { .. }
        ));
    }

    #[test]
    fn emit_single_link_matches_canonical_text() {
        let d = WorkflowDiagram::new(vec![link(
            "CLIP Text Encoder_0",
            "CONDITIONING",
            "KSampler_0",
            "positive",
        )])
        .unwrap();
        assert_eq!(
            String::from_utf8(emit_diagram(&d)).unwrap(),
            r#"[["CLIP Text Encoder_0","CONDITIONING","KSampler_0","positive"]]"#
        );
    }

    #[test]
    fn emit_empty_diagram() {
        assert_eq!(emit_diagram(&WorkflowDiagram::empty()), b"[]");
    }

    #[test]
    fn emit_is_deterministic() {
        let d = WorkflowDiagram::new(vec![
            link("A_0", "OUT", "B_0", "x"),
            link("A_0", "OUT", "B_0", "y"),
        ])
        .unwrap();
        assert_eq!(emit_diagram(&d), emit_diagram(&d));
    }

    #[test]
    fn round_trip_preserves_links_and_order() {
        let d = WorkflowDiagram::new(vec![
            link("B_0", "OUT", "A_1", "x"),
            link("A_0", "OUT", "A_1", "y"),
            link("A_1", "OUT", "C_0", "z"),
        ])
        .unwrap();
        let reparsed = parse_diagram(&emit_diagram(&d)).unwrap();
        assert_eq!(reparsed, d);
    }

    #[test]
    fn eq_unordered_ignores_link_order() {
        let a = WorkflowDiagram::new(vec![
            link("A_0", "OUT", "B_0", "x"),
            link("A_0", "OUT", "B_0", "y"),
        ])
        .unwrap();
        let b = WorkflowDiagram::new(vec![
            link("A_0", "OUT", "B_0", "y"),
            link("A_0", "OUT", "B_0", "x"),
        ])
        .unwrap();
        assert!(a.eq_unordered(&b));
        assert_ne!(a, b);
    }
}
