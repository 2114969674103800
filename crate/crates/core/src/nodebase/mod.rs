//! The node database: known node specs keyed by name, with name
//! embeddings for similarity retrieval.
//!
//! The snapshot wire format is a JSON array of objects with `node_name`,
//! `input_names`, `output_names`, and the optional keys `input_types`,
//! `output_types`, `required_inputs`, and `input_defaults`.

mod embedding;

pub use embedding::{
    similarity, EmbedError, Embedding, EmbeddingProvider, RemoteEmbeddingProvider, TrigramProvider,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ir::PortName;

#[derive(Debug, Error)]
pub enum NodeBaseError {
    #[error("malformed json: {0}")]
    MalformedJson(String),
    #[error("duplicate node name \"{0}\"")]
    DuplicateNodeName(String),
    #[error("failed to embed \"{name}\": {source}")]
    EmbeddingFailure {
        name: String,
        #[source]
        source: EmbedError,
    },
    #[error("invalid spec for \"{name}\": {message}")]
    SpecViolation { name: String, message: String },
    #[error("query provider \"{query}\" does not match base provider \"{base}\"")]
    ProviderMismatch { query: String, base: String },
    #[error("node base is empty")]
    EmptyBase,
}

/// One known node: its name plus input/output port specifications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub node_name: String,
    #[serde(default)]
    pub input_names: Vec<PortName>,
    #[serde(default)]
    pub output_names: Vec<PortName>,
    /// Parallel to `input_names` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_types: Option<Vec<String>>,
    /// Parallel to `output_names` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_types: Option<Vec<String>>,
    /// Inputs that must be satisfied by a link or a widget default.
    /// Absent means no required-input information is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_inputs: Option<Vec<PortName>>,
    /// Widget default values keyed by input name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_defaults: Option<BTreeMap<String, Value>>,
}

impl NodeSpec {
    pub fn new(name: impl Into<String>) -> Self {
        NodeSpec {
            node_name: name.into(),
            input_names: Vec::new(),
            output_names: Vec::new(),
            input_types: None,
            output_types: None,
            required_inputs: None,
            input_defaults: None,
        }
    }

    fn validate(&self) -> Result<(), NodeBaseError> {
        let violation = |message: String| NodeBaseError::SpecViolation {
            name: self.node_name.clone(),
            message,
        };
        if self.node_name.is_empty() {
            return Err(violation("node_name must be non-empty".into()));
        }
        for (label, names) in [("input", &self.input_names), ("output", &self.output_names)] {
            let unique: BTreeSet<_> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(violation(format!("{label} names must be unique")));
            }
        }
        if let Some(types) = &self.input_types {
            if types.len() != self.input_names.len() {
                return Err(violation("input_types must parallel input_names".into()));
            }
        }
        if let Some(types) = &self.output_types {
            if types.len() != self.output_names.len() {
                return Err(violation("output_types must parallel output_names".into()));
            }
        }
        if let Some(required) = &self.required_inputs {
            for port in required {
                if !self.input_names.contains(port) {
                    return Err(violation(format!(
                        "required input \"{port}\" is not an input name"
                    )));
                }
            }
        }
        if let Some(defaults) = &self.input_defaults {
            for key in defaults.keys() {
                if !self.input_names.iter().any(|p| p.as_str() == key) {
                    return Err(violation(format!(
                        "default for \"{key}\" does not match any input name"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_index(&self, port: &str) -> Option<usize> {
        self.input_names.iter().position(|p| p.as_str() == port)
    }

    pub fn output_index(&self, port: &str) -> Option<usize> {
        self.output_names.iter().position(|p| p.as_str() == port)
    }

    /// Declared type of an input port, when typed info is present.
    pub fn input_type(&self, port: &str) -> Option<&str> {
        let idx = self.input_index(port)?;
        self.input_types.as_ref().map(|t| t[idx].as_str())
    }

    /// Declared type of an output port, when typed info is present.
    pub fn output_type(&self, port: &str) -> Option<&str> {
        let idx = self.output_index(port)?;
        self.output_types.as_ref().map(|t| t[idx].as_str())
    }

    pub fn is_required(&self, port: &str) -> bool {
        self.required_inputs
            .as_ref()
            .is_some_and(|r| r.iter().any(|p| p.as_str() == port))
    }

    pub fn default_for(&self, port: &str) -> Option<&Value> {
        self.input_defaults.as_ref().and_then(|d| d.get(port))
    }
}

/// Immutable collection of node specs with one embedding per name, all
/// produced by a single provider.
#[derive(Debug, Clone)]
pub struct NodeBase {
    specs: BTreeMap<String, NodeSpec>,
    embeddings: BTreeMap<String, Embedding>,
    provider_id: String,
    dimension: usize,
}

impl NodeBase {
    /// Builds a base from validated specs, embedding every node name.
    pub fn build(
        specs: Vec<NodeSpec>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self, NodeBaseError> {
        let mut spec_map = BTreeMap::new();
        let mut embeddings = BTreeMap::new();
        for spec in specs {
            spec.validate()?;
            let name = spec.node_name.clone();
            if spec_map.contains_key(&name) {
                return Err(NodeBaseError::DuplicateNodeName(name));
            }
            let embedding =
                provider
                    .embed(&name)
                    .map_err(|source| NodeBaseError::EmbeddingFailure {
                        name: name.clone(),
                        source,
                    })?;
            embeddings.insert(name.clone(), embedding);
            spec_map.insert(name, spec);
        }
        Ok(NodeBase {
            specs: spec_map,
            embeddings,
            provider_id: provider.id().to_string(),
            dimension: provider.dimension(),
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn contains(&self, node_name: &str) -> bool {
        self.specs.contains_key(node_name)
    }

    /// Exact, case-sensitive lookup. Absent names yield `None`.
    pub fn lookup(&self, node_name: &str) -> Option<&NodeSpec> {
        self.specs.get(node_name)
    }

    pub fn embedding(&self, node_name: &str) -> Option<&Embedding> {
        self.embeddings.get(node_name)
    }

    pub fn specs(&self) -> impl Iterator<Item = &NodeSpec> {
        self.specs.values()
    }

    /// All known node names, the valid-name set used by the reward.
    pub fn name_set(&self) -> BTreeSet<String> {
        self.specs.keys().cloned().collect()
    }
}

/// Parses a snapshot into specs, rejecting duplicates within the file.
pub fn parse_specs(bytes: &[u8]) -> Result<Vec<NodeSpec>, NodeBaseError> {
    let specs: Vec<NodeSpec> =
        serde_json::from_slice(bytes).map_err(|e| NodeBaseError::MalformedJson(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for spec in &specs {
        spec.validate()?;
        if !seen.insert(spec.node_name.clone()) {
            return Err(NodeBaseError::DuplicateNodeName(spec.node_name.clone()));
        }
    }
    Ok(specs)
}

/// Parses a snapshot file and embeds every node name with the provider.
pub fn ingest(bytes: &[u8], provider: &dyn EmbeddingProvider) -> Result<NodeBase, NodeBaseError> {
    NodeBase::build(parse_specs(bytes)?, provider)
}

/// Serializes spec fields back to the snapshot format, sorted by name.
/// Embeddings are derived data and are not included.
pub fn emit_specs(base: &NodeBase) -> Vec<u8> {
    let specs: Vec<&NodeSpec> = base.specs().collect();
    serde_json::to_vec_pretty(&specs).expect("spec serialization is infallible")
}

/// Unions spec lists; on duplicate names the record from the latest list
/// wins.
pub fn merge_spec_lists(lists: Vec<Vec<NodeSpec>>) -> Vec<NodeSpec> {
    let mut merged: BTreeMap<String, NodeSpec> = BTreeMap::new();
    for list in lists {
        for spec in list {
            merged.insert(spec.node_name.clone(), spec);
        }
    }
    merged.into_values().collect()
}

/// Ranks the base's nodes by cosine similarity to the query name and
/// returns the `min(k, |base|)` best as `(node_name, score)` pairs.
/// Ties break by ascending lexicographic node name.
pub fn top_k(
    base: &NodeBase,
    query_name: &str,
    k: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<(String, f64)>, NodeBaseError> {
    if base.is_empty() {
        return Err(NodeBaseError::EmptyBase);
    }
    if provider.id() != base.provider_id {
        return Err(NodeBaseError::ProviderMismatch {
            query: provider.id().to_string(),
            base: base.provider_id.clone(),
        });
    }
    let query = provider
        .embed(query_name)
        .map_err(|source| NodeBaseError::EmbeddingFailure {
            name: query_name.to_string(),
            source,
        })?;
    let mut scored: Vec<(String, f64)> = base
        .embeddings
        .iter()
        .map(|(name, emb)| {
            let score = similarity(&query, emb).map_err(|source| {
                NodeBaseError::EmbeddingFailure {
                    name: name.clone(),
                    source,
                }
            })?;
            Ok((name.clone(), score))
        })
        .collect::<Result<_, NodeBaseError>>()?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k.min(scored.len()));
    Ok(scored)
}
