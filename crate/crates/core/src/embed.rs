//! Text embedders: a seeded feature-hashing embedder for offline runs and a client for
//! OpenAI-compatible embedding services.

use std::ops::Deref;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::remote::{EndpointConfig, JsonClient};

/// A fixed-length vector of finite floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                field: "embedding",
                index,
            });
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }
}

impl Deref for Embedding {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding>;

    /// Order-preserving batch embedding. Any failure fails the whole batch and the
    /// error lists the failing indices.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(texts.len());
        let mut failed = Vec::new();
        let mut message = String::new();
        for (i, t) in texts.iter().enumerate() {
            match self.embed(t) {
                Ok(e) => out.push(e),
                Err(e) => {
                    if failed.is_empty() {
                        message = e.to_string();
                    }
                    failed.push(i);
                }
            }
        }
        if failed.is_empty() {
            Ok(out)
        } else {
            Err(Error::Batch {
                indices: failed,
                message,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Toy {
        dimension: usize,
        seed: u64,
    },
    Remote {
        dimension: usize,
        #[serde(flatten)]
        endpoint: EndpointConfig,
    },
}

impl EmbedderSpec {
    pub fn dimension(&self) -> usize {
        match self {
            EmbedderSpec::Toy { dimension, .. } | EmbedderSpec::Remote { dimension, .. } => *dimension,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self {
            EmbedderSpec::Toy { dimension, seed } => Box::new(ToyEmbedder::new(*dimension, *seed)?),
            EmbedderSpec::Remote { dimension, endpoint } => {
                Box::new(RemoteEmbedder::new(*dimension, endpoint.clone())?)
            }
        })
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Character 3-gram feature hashing with signed buckets, L2-normalized.
///
/// The trimmed text is padded with one space on each side; every window of three
/// Unicode scalar values is hashed with seeded FNV-1a (seed as 8 little-endian bytes,
/// then the UTF-8 gram). The bucket is `hash % dimension`, the sign is the hash's top bit.
/// If all contributions cancel, the bucket of the whole padded text gets `+1`.
#[derive(Clone, Debug)]
pub struct ToyEmbedder {
    dimension: usize,
    seed: u64,
}

impl ToyEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dimension, seed })
    }

    fn hash(&self, bytes: &[u8]) -> u64 {
        let mut h = FNV_OFFSET;
        for &b in self.seed.to_le_bytes().iter().chain(bytes) {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        h
    }
}

impl Embedder for ToyEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::EmptyText);
        }
        let padded: Vec<char> = std::iter::once(' ')
            .chain(trimmed.chars())
            .chain(std::iter::once(' '))
            .collect();
        let d = self.dimension as u64;
        let mut acc = vec![0f64; self.dimension];
        let mut buf = String::with_capacity(12);
        for gram in padded.windows(3) {
            buf.clear();
            buf.extend(gram);
            let h = self.hash(buf.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            acc[(h % d) as usize] += sign;
        }
        let mut norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            let whole: String = padded.iter().collect();
            acc[(self.hash(whole.as_bytes()) % d) as usize] = 1.0;
            norm = 1.0;
        }
        Embedding::new(acc.into_iter().map(|v| (v / norm) as f32).collect())
    }
}

/// Embeddings from an OpenAI-compatible `/embeddings` endpoint, returned as served.
#[derive(Clone, Debug)]
pub struct RemoteEmbedder {
    dimension: usize,
    client: JsonClient,
}

impl RemoteEmbedder {
    pub fn new(dimension: usize, endpoint: EndpointConfig) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dimension,
            client: JsonClient::new(endpoint)?,
        })
    }

    fn request(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let body = json!({ "model": self.client.config().model, "input": texts });
        let resp = self.client.post("embeddings", &body)?;
        let bad = |message: String| Error::Remote {
            endpoint: format!("{}/embeddings", self.client.config().base_url),
            attempts: 1,
            message,
        };
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("response has no `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(bad(format!("expected {} embeddings, got {}", texts.len(), data.len())));
        }
        let mut slots: Vec<Option<Embedding>> = vec![None; texts.len()];
        for (pos, entry) in data.iter().enumerate() {
            let index = entry.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let values: Vec<f32> = entry
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| bad(format!("entry {pos} has no embedding")))?
                .iter()
                .map(|v| v.as_f64().map(|f| f as f32))
                .collect::<Option<_>>()
                .ok_or_else(|| bad(format!("entry {pos} has non-numeric values")))?;
            if values.len() != self.dimension {
                return Err(bad(format!(
                    "entry {pos} has dimension {}, expected {}",
                    values.len(),
                    self.dimension
                )));
            }
            let slot = slots
                .get_mut(index)
                .ok_or_else(|| bad(format!("entry index {index} out of range")))?;
            *slot = Some(Embedding::new(values)?);
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, e)| e.ok_or_else(|| bad(format!("missing embedding for input {i}"))))
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let mut v = self.request(&[text.to_string()])?;
        Ok(v.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let empty: Vec<usize> = texts
            .iter()
            .enumerate()
            .filter(|(_, t)| t.trim().is_empty())
            .map(|(i, _)| i)
            .collect();
        if !empty.is_empty() {
            return Err(Error::Batch {
                indices: empty,
                message: Error::EmptyText.to_string(),
            });
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        // transport failures stay `Remote` so callers can tell them apart from bad data
        self.request(texts).map_err(|e| match e {
            Error::Remote { .. } => e,
            other => Error::Batch {
                indices: (0..texts.len()).collect(),
                message: other.to_string(),
            },
        })
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Embedding> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        (**self).embed_batch(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Embedding> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        (**self).embed_batch(texts)
    }
}
