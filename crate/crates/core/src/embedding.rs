//! Text encoders, cosine similarity, and exact top-k retrieval over a pool.
//!
//! Two encoders sit behind [`Encoder`]:
//!
//! * [`HashEncoder`], a dependency-free feature-hashing bag of words. Each
//!   lowercase alphanumeric token (`_` counts as alphanumeric) and each pair of
//!   adjacent tokens joined by a single space is hashed with 64-bit FNV-1a.
//!   The hash picks bucket `h % dim` and sign `+1` if bit 63 is clear, `-1`
//!   otherwise. The bucket sums are then L2-normalized.
//! * [`HttpEncoder`], which posts `{"texts":[...]}` to an embedding service and
//!   expects `{"embeddings":[[...],...]}` back.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{MemoryId, MemoryPool};
use crate::retry::with_backoff;

pub const DEFAULT_DIM: usize = 64;

/// A finite, non-zero vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(Error::ZeroVector);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredNeighbor {
    pub id: MemoryId,
    pub score: f64,
}

/// Exact top-k by cosine similarity: descending score, ties by ascending id.
pub fn top_k(pool: &MemoryPool, query: &Embedding, k: usize) -> Result<Vec<ScoredNeighbor>> {
    if k == 0 {
        return Err(Error::InvalidInput("top_k requires k >= 1".into()));
    }
    let mut scored = pool
        .iter()
        .map(|entry| {
            cosine_similarity(query, &entry.embedding).map(|score| ScoredNeighbor {
                id: entry.id,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // Pool iteration is ascending by id and the sort is stable, so equal
    // scores keep ascending id order.
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    scored.truncate(k);
    Ok(scored)
}

pub trait Encoder: Send + Sync {
    fn encode(&self, text: &str) -> Result<Embedding>;
}

impl<E: Encoder + ?Sized> Encoder for Box<E> {
    fn encode(&self, text: &str) -> Result<Embedding> {
        (**self).encode(text)
    }
}

#[derive(Clone, Debug)]
pub struct HashEncoder {
    dim: usize,
}

impl Default for HashEncoder {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM }
    }
}

impl HashEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput(
                "encoder dimension must be positive".into(),
            ));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub(crate) fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Encoder for HashEncoder {
    fn encode(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("cannot encode empty text".into()));
        }
        let tokens = word_tokens(text);
        if tokens.is_empty() {
            return Err(Error::InvalidInput(format!("no tokens in {text:?}")));
        }
        let mut values = vec![0.0f64; self.dim];
        let mut add = |feature: &str| {
            let h = fnv1a64(feature.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            values[(h % self.dim as u64) as usize] += sign;
        };
        for token in &tokens {
            add(token);
        }
        for pair in tokens.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Embedding::new(values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttpEncoderConfig {
    pub endpoint: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Environment variable holding a bearer token, if the service needs one.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_max_retries() -> u32 {
    3
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

pub struct HttpEncoder {
    config: HttpEncoderConfig,
    client: reqwest::blocking::Client,
    backoff_base: Duration,
}

impl HttpEncoder {
    pub fn new(config: HttpEncoderConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            config,
            client,
            backoff_base: Duration::from_millis(500),
        })
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::InvalidInput("cannot encode empty text".into()));
        }
        let body = EmbedRequest {
            model: self.config.model.as_deref(),
            texts,
        };
        let token = self
            .config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        let response: EmbedResponse =
            with_backoff(self.config.max_retries, self.backoff_base, |_| {
                let mut req = self.client.post(&self.config.endpoint).json(&body);
                if let Some(token) = &token {
                    req = req.bearer_auth(token);
                }
                let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
                let status = resp.status();
                if status.is_server_error() || status.as_u16() == 429 {
                    return Err(Error::Transport(format!(
                        "embedding service returned {status}"
                    )));
                }
                if !status.is_success() {
                    return Err(Error::InvalidInput(format!(
                        "embedding service returned {status}"
                    )));
                }
                resp.json::<EmbedResponse>()
                    .map_err(|e| Error::InvalidInput(format!("bad embedding response: {e}")))
            })?;
        if response.embeddings.len() != texts.len() {
            return Err(Error::InvalidInput(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                response.embeddings.len()
            )));
        }
        response
            .embeddings
            .into_iter()
            .map(Embedding::new)
            .collect()
    }
}

impl Encoder for HttpEncoder {
    fn encode(&self, text: &str) -> Result<Embedding> {
        let mut out = self.encode_batch(&[text])?;
        Ok(out.remove(0))
    }
}
