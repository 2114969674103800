//! Property tests for the serialization and scoring invariants.

use std::collections::BTreeSet;

use proptest::prelude::*;

use comfyflow::genflow::{advantages, reward, GroupRewards};
use comfyflow::ir::{
    emit_diagram, emit_graph_workflow, parse_diagram, parse_graph_workflow, GraphBuilder, IrError,
    Link, NodeRef, PortName, WorkflowDiagram,
};

fn type_name_strategy() -> impl Strategy<Value = String> {
    // Realistic node names: letters, digits, spaces, underscores, and
    // punctuation seen in the wild, with no surrounding whitespace.
    proptest::string::string_regex("[A-Za-z][A-Za-z0-9_+: ]{0,14}[A-Za-z0-9+)]")
        .unwrap()
        .prop_filter("no surrounding whitespace", |s| s.trim() == s)
}

/// Structurally valid diagrams: dense ordinals per type, unique input
/// slots.
fn diagram_strategy() -> impl Strategy<Value = WorkflowDiagram> {
    let names = proptest::collection::vec(type_name_strategy(), 1..6);
    (names, 0usize..10, any::<u64>()).prop_map(|(pool, link_count, seed)| {
        let mut links = Vec::new();
        let mut counts: std::collections::BTreeMap<String, u32> = Default::default();
        let mut state = seed;
        let mut next = |bound: usize| -> usize {
            // Cheap deterministic LCG keeps the strategy shrinkable.
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as usize % bound.max(1)
        };
        for i in 0..link_count {
            let out_name = pool[next(pool.len())].clone();
            let in_name = pool[next(pool.len())].clone();
            // Ordinal 0..=count keeps the per-type set dense.
            let mut ordinal_for = |name: &str| -> u32 {
                let c = counts.entry(name.to_string()).or_insert(0);
                let ordinal = next(*c as usize + 1) as u32;
                if ordinal == *c {
                    *c += 1;
                }
                ordinal
            };
            let out_ord = ordinal_for(&out_name);
            let in_ord = ordinal_for(&in_name);
            links.push(Link {
                out_node: NodeRef::new(out_name, out_ord).unwrap(),
                out_port: PortName::new("OUT").unwrap(),
                in_node: NodeRef::new(in_name, in_ord).unwrap(),
                in_port: PortName::new(format!("in{i}")).unwrap(),
            });
        }
        WorkflowDiagram::new(links).expect("constructed diagrams are valid")
    })
}

proptest! {
    #[test]
    fn diagram_parse_emit_identity(diagram in diagram_strategy()) {
        let bytes = emit_diagram(&diagram);
        let reparsed = parse_diagram(&bytes).unwrap();
        prop_assert_eq!(&reparsed, &diagram);
        // Emission is stable after one normalization.
        prop_assert_eq!(emit_diagram(&reparsed), bytes);
    }

    #[test]
    fn node_ref_rendering_is_bijective(name in type_name_strategy(), ordinal in 0u32..1000) {
        let node = NodeRef::new(name, ordinal).unwrap();
        let parsed = NodeRef::parse(&node.render()).unwrap();
        prop_assert_eq!(parsed, node);
    }

    #[test]
    fn second_producer_for_input_slot_is_always_rejected(
        diagram in diagram_strategy(),
        new_out in type_name_strategy(),
    ) {
        prop_assume!(!diagram.is_empty());
        // Duplicate any existing (in_node, in_port) with a fresh producer.
        let victim = diagram.links()[0].clone();
        let mut links = diagram.links().to_vec();
        links.push(Link {
            out_node: NodeRef::new(new_out, 0).unwrap(),
            out_port: PortName::new("OUT").unwrap(),
            in_node: victim.in_node.clone(),
            in_port: victim.in_port.clone(),
        });
        let rejected = matches!(
            WorkflowDiagram::new(links),
            Err(IrError::DuplicateInputSlot { .. })
        );
        prop_assert!(rejected);
    }

    #[test]
    fn reward_matches_set_difference_oracle(
        diagram in diagram_strategy(),
        mask in proptest::collection::vec(any::<bool>(), 6),
    ) {
        let names: Vec<&str> = diagram.type_names().into_iter().collect();
        let valid: BTreeSet<String> = names
            .iter()
            .enumerate()
            .filter(|(i, _)| mask[i % mask.len()])
            .map(|(_, n)| n.to_string())
            .collect();
        let mentioned: BTreeSet<String> = names.iter().map(|n| n.to_string()).collect();
        let oracle = if mentioned.is_subset(&valid) { 1.0 } else { 0.0 };
        prop_assert_eq!(reward(&diagram, &valid), oracle);
    }

    #[test]
    fn advantages_are_permutation_equivariant(
        rewards in proptest::collection::vec(proptest::bool::ANY, 2..12),
        rotation in 0usize..12,
    ) {
        let rewards: Vec<f64> = rewards.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        let k = rotation % rewards.len();
        let mut rotated = rewards.clone();
        rotated.rotate_left(k);

        let base = advantages(&GroupRewards::new(rewards).unwrap());
        let mut expected = base.advantages().to_vec();
        expected.rotate_left(k);
        let got = advantages(&GroupRewards::new(rotated).unwrap());
        for (a, b) in got.advantages().iter().zip(expected) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn advantages_zero_mean_unit_std(
        rewards in proptest::collection::vec(proptest::bool::ANY, 2..12),
    ) {
        let rewards: Vec<f64> = rewards.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        let constant = rewards.iter().all(|r| *r == rewards[0]);
        let set = advantages(&GroupRewards::new(rewards).unwrap());
        let n = set.advantages().len() as f64;
        let sum: f64 = set.advantages().iter().sum();
        if constant {
            prop_assert!(set.advantages().iter().all(|a| *a == 0.0));
        } else {
            prop_assert!(sum.abs() < 1e-9);
            let std = (set.advantages().iter().map(|a| a * a).sum::<f64>() / n).sqrt();
            prop_assert!((std - 1.0).abs() < 1e-9);
        }
    }
}

/// Random coherent graphs for the workflow-schema round trip.
fn graph_strategy() -> impl Strategy<Value = comfyflow::ir::GraphWorkflow> {
    (2usize..12, any::<u64>()).prop_map(|(n, seed)| {
        let mut state = seed;
        let mut next = |bound: usize| -> usize {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as usize % bound.max(1)
        };
        let types = ["IMAGE", "MODEL", "LATENT"];
        let mut b = GraphBuilder::new();
        let mut ids = Vec::new();
        for i in 0..n {
            let id = b.node(&format!("Node Kind {}", i % 4));
            let ty = types[next(types.len())];
            b.output(id, "out", ty);
            b.input(id, "a", types[next(types.len())]);
            b.input(id, "b", types[next(types.len())]);
            if next(2) == 0 {
                b.widget(id, serde_json::json!(next(100)));
            }
            ids.push(id);
        }
        for i in 1..n {
            for port in ["a", "b"] {
                if next(3) == 0 {
                    continue;
                }
                let src = ids[next(i)];
                let dst = ids[i];
                // Only wire when the types agree.
                let _ = (src, dst);
                let ty_src = b
                    .clone_graph_output_type(src);
                let ty_dst = b.clone_graph_input_type(dst, port);
                if ty_src == ty_dst {
                    let _ = b.connect(src, "out", dst, port);
                }
            }
        }
        b.finish().unwrap()
    })
}

// Small accessors used only by the strategy above.
trait BuilderProbe {
    fn clone_graph_output_type(&self, node: u64) -> String;
    fn clone_graph_input_type(&self, node: u64, port: &str) -> String;
}

impl BuilderProbe for GraphBuilder {
    fn clone_graph_output_type(&self, node: u64) -> String {
        self.peek(node)
            .and_then(|n| n.outputs.first())
            .map(|s| s.value_type.clone())
            .unwrap_or_default()
    }
    fn clone_graph_input_type(&self, node: u64, port: &str) -> String {
        self.peek(node)
            .and_then(|n| n.inputs.iter().find(|s| s.name == port))
            .map(|s| s.value_type.clone())
            .unwrap_or_default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn graph_workflow_parse_emit_identity(graph in graph_strategy()) {
        let bytes = emit_graph_workflow(&graph);
        let reparsed = parse_graph_workflow(&bytes).unwrap();
        prop_assert_eq!(&reparsed, &graph);
        prop_assert_eq!(emit_graph_workflow(&reparsed), bytes);
    }
}
