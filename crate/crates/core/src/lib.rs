//! Evolving cross-user memory for LLM re-ranking.
//!
//! Training slides a window over each user's history, asks the language
//! model for an abstract behavior pattern, and merges it into a pool shared
//! by all users. A similarity validator decides whether the new pattern is
//! stored, used to evolve its neighbors, or both. A semantic validator then
//! confirms which neighbors really share the pattern. At ranking time the
//! nearest memories are handed to the model alongside the user's recent
//! history.

pub mod agent;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod memory;
pub mod pipeline;
pub mod policy;
pub mod retry;

#[cfg(test)]
mod test_http;

pub use agent::{AgentGateway, LlmProvider, MockConfig, MockProvider, ProviderConfig};
pub use dataset::{Dataset, EvalInstance, Interaction, Item, UserHistory};
pub use embedding::{cosine_similarity, top_k, Embedding, Encoder, HashEncoder};
pub use error::{Error, Result};
pub use memory::{MemoryEntry, MemoryId, MemoryPool, PatternText};
pub use policy::{PolicyDecision, SimilarityValidator, Strategy, Thresholds};

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    use std::fmt::Write;
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}
