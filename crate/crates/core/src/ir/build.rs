//! Programmatic construction of workflow graphs with coherent
//! slot/link cross-references.

use super::graph::{GraphLink, GraphNode, GraphWorkflow, InputSlot, NodeMode, OutputSlot};
use super::IrError;

/// Builds a [`GraphWorkflow`] node by node, wiring links by port name.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: GraphWorkflow,
    next_node_id: u64,
    next_link_id: u64,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder {
            graph: GraphWorkflow::default(),
            next_node_id: 1,
            next_link_id: 1,
        }
    }

    /// Adds a node and returns its id.
    pub fn node(&mut self, type_name: &str) -> u64 {
        self.node_with_mode(type_name, NodeMode::Normal)
    }

    pub fn node_with_mode(&mut self, type_name: &str, mode: NodeMode) -> u64 {
        let id = self.next_node_id;
        self.next_node_id += 1;
        let mut node = GraphNode::new(id, type_name);
        node.mode = mode;
        self.graph.nodes.push(node);
        id
    }

    fn node_mut(&mut self, id: u64) -> &mut GraphNode {
        self.graph
            .node_mut(id)
            .expect("builder node ids are always valid")
    }

    /// Read access to a node added so far.
    pub fn peek(&self, id: u64) -> Option<&GraphNode> {
        self.graph.node(id)
    }

    /// Declares an input slot on a node.
    pub fn input(&mut self, node: u64, name: &str, value_type: &str) -> &mut Self {
        self.node_mut(node).inputs.push(InputSlot {
            name: name.to_string(),
            value_type: value_type.to_string(),
            incoming_link_id: None,
            extra: serde_json::Map::new(),
        });
        self
    }

    /// Declares an output slot on a node.
    pub fn output(&mut self, node: u64, name: &str, value_type: &str) -> &mut Self {
        self.node_mut(node).outputs.push(OutputSlot {
            name: name.to_string(),
            value_type: value_type.to_string(),
            outgoing_link_ids: Vec::new(),
            extra: serde_json::Map::new(),
        });
        self
    }

    /// Appends a widget value to a node.
    pub fn widget(&mut self, node: u64, value: serde_json::Value) -> &mut Self {
        self.node_mut(node).widget_values.push(value);
        self
    }

    /// Wires `src`'s output port into `dst`'s input port; the link takes
    /// the source output slot's value type.
    pub fn connect(
        &mut self,
        src: u64,
        out_port: &str,
        dst: u64,
        in_port: &str,
    ) -> Result<u64, IrError> {
        let src_node = self
            .graph
            .node(src)
            .ok_or_else(|| IrError::schema("/links", format!("unknown src node {src}")))?;
        let src_slot = src_node
            .outputs
            .iter()
            .position(|s| s.name == out_port)
            .ok_or_else(|| {
                IrError::schema("/links", format!("node {src} has no output \"{out_port}\""))
            })?;
        let value_type = src_node.outputs[src_slot].value_type.clone();
        let dst_node = self
            .graph
            .node(dst)
            .ok_or_else(|| IrError::schema("/links", format!("unknown dst node {dst}")))?;
        let dst_slot = dst_node
            .inputs
            .iter()
            .position(|s| s.name == in_port)
            .ok_or_else(|| {
                IrError::schema("/links", format!("node {dst} has no input \"{in_port}\""))
            })?;
        if dst_node.inputs[dst_slot].incoming_link_id.is_some() {
            return Err(IrError::DuplicateInputSlot {
                node: format!("{}#{dst}", dst_node.type_name),
                port: in_port.to_string(),
            });
        }
        let id = self.next_link_id;
        self.next_link_id += 1;
        self.graph.links.push(GraphLink {
            id,
            src_node_id: src,
            src_slot,
            dst_node_id: dst,
            dst_slot,
            value_type,
        });
        self.node_mut(src).outputs[src_slot]
            .outgoing_link_ids
            .push(id);
        self.node_mut(dst).inputs[dst_slot].incoming_link_id = Some(id);
        Ok(id)
    }

    /// Finishes the build, checking all graph invariants.
    pub fn finish(self) -> Result<GraphWorkflow, IrError> {
        self.graph.check_invariants()?;
        Ok(self.graph)
    }
}
