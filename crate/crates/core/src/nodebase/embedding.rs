//! Embedding providers: a deterministic offline trigram hasher and a
//! remote embedding-service client sharing one interface.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cannot normalize a zero or non-finite vector")]
    Degenerate,
    #[error("embedding service error: {0}")]
    Service(String),
}

/// A unit-normalized embedding vector of fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Normalizes to unit L2 norm. Zero or non-finite input is rejected.
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(EmbedError::Degenerate);
        }
        Ok(Embedding {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity between two embeddings, clamped to [-1, 1].
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch(a.dimension(), b.dimension()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let cos = dot / (a.norm() * b.norm());
    Ok(cos.clamp(-1.0, 1.0))
}

/// Turns text into a unit embedding. Implementations must be
/// deterministic per `id()` so that bases and queries stay comparable.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier recorded in the node base; querying with a
    /// different provider id is an error.
    fn id(&self) -> &str;

    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;
}

/// Offline fallback: hashed character trigrams over the lowercased text,
/// bucketed into a fixed-dimension count vector and L2-normalized.
#[derive(Debug, Clone)]
pub struct TrigramProvider {
    dimension: usize,
    id: String,
}

impl TrigramProvider {
    pub const DEFAULT_DIMENSION: usize = 256;

    pub fn new(dimension: usize) -> Self {
        TrigramProvider {
            dimension,
            id: format!("trigram-{dimension}"),
        }
    }
}

impl Default for TrigramProvider {
    fn default() -> Self {
        TrigramProvider::new(Self::DEFAULT_DIMENSION)
    }
}

/// FNV-1a over the trigram bytes; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl EmbeddingProvider for TrigramProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut buckets = vec![0.0f64; self.dimension];
        let lowered = text.to_lowercase();
        // Pad with sentinels so short names and word boundaries contribute.
        let chars: Vec<char> = std::iter::once('\u{2}')
            .chain(lowered.chars())
            .chain(std::iter::once('\u{3}'))
            .collect();
        for window in chars.windows(3) {
            let gram: String = window.iter().collect();
            let idx = (fnv1a(gram.as_bytes()) % self.dimension as u64) as usize;
            buckets[idx] += 1.0;
        }
        Embedding::new(buckets)
    }
}

/// Client for a remote embedding service.
///
/// Wire contract: POST `{"text": ..., "model": ...}` to the endpoint,
/// response `{"vector": [f64; D]}`. One retry on transient failure.
#[derive(Debug, Clone)]
pub struct RemoteEmbeddingProvider {
    endpoint: String,
    model: Option<String>,
    dimension: usize,
    id: String,
    client: reqwest::blocking::Client,
}

impl RemoteEmbeddingProvider {
    pub fn new(
        endpoint: impl Into<String>,
        model: Option<String>,
        dimension: usize,
        timeout: std::time::Duration,
    ) -> Result<Self, EmbedError> {
        let endpoint = endpoint.into();
        let id = match &model {
            Some(m) => format!("remote-{m}-{dimension}"),
            None => format!("remote-{dimension}"),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedError::Service(e.to_string()))?;
        Ok(RemoteEmbeddingProvider {
            endpoint,
            model,
            dimension,
            id,
            client,
        })
    }

    fn request_once(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        #[derive(Serialize)]
        struct Request<'a> {
            text: &'a str,
            #[serde(skip_serializing_if = "Option::is_none")]
            model: Option<&'a str>,
        }
        #[derive(Deserialize)]
        struct Response {
            vector: Vec<f64>,
        }
        let response = self
            .client
            .post(&self.endpoint)
            .json(&Request {
                text,
                model: self.model.as_deref(),
            })
            .send()
            .map_err(|e| EmbedError::Service(e.to_string()))?;
        if !response.status().is_success() {
            return Err(EmbedError::Service(format!(
                "embedding service returned {}",
                response.status()
            )));
        }
        let body: Response = response
            .json()
            .map_err(|e| EmbedError::Service(e.to_string()))?;
        Ok(body.vector)
    }
}

impl EmbeddingProvider for RemoteEmbeddingProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let vector = match self.request_once(text) {
            Ok(v) => v,
            // Retry once on transient failure.
            Err(_) => self.request_once(text)?,
        };
        if vector.len() != self.dimension {
            return Err(EmbedError::DimensionMismatch(vector.len(), self.dimension));
        }
        Embedding::new(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_normalized() {
        let e = Embedding::new(vec![3.0, 4.0]).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-9);
        assert_eq!(e.values(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_vector_is_rejected() {
        assert!(matches!(
            Embedding::new(vec![0.0, 0.0]),
            Err(EmbedError::Degenerate)
        ));
    }

    #[test]
    fn similarity_matches_hand_arithmetic() {
        let a = Embedding::new(vec![0.6, 0.8]).unwrap();
        let b = Embedding::new(vec![1.0, 0.0]).unwrap();
        assert!((similarity(&a, &b).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn similarity_identical_and_orthogonal() {
        let a = Embedding::new(vec![1.0, 0.0]).unwrap();
        let b = Embedding::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(similarity(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn similarity_rejects_dimension_mismatch() {
        let a = Embedding::new(vec![1.0, 0.0]).unwrap();
        let b = Embedding::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            similarity(&a, &b),
            Err(EmbedError::DimensionMismatch(2, 3))
        ));
    }

    #[test]
    fn trigram_provider_is_deterministic() {
        let p = TrigramProvider::default();
        let a = p.embed("KSampler").unwrap();
        let b = p.embed("KSampler").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dimension(), 256);
    }

    #[test]
    fn trigram_similar_names_score_higher_than_unrelated() {
        let p = TrigramProvider::default();
        let query = p.embed("ReplaceString").unwrap();
        let close = p.embed("LogicUtil_ReplaceString").unwrap();
        let far = p.embed("VAEDecode").unwrap();
        let s_close = similarity(&query, &close).unwrap();
        let s_far = similarity(&query, &far).unwrap();
        assert!(s_close > s_far, "{s_close} <= {s_far}");
    }
}
