//! Memory data model and the global, cross-user memory pool.
//!
//! A memory is a pair of distilled texts (behavior explanation and pattern
//! description) together with the embedding of that text. The pool is
//! id-addressed, only ever grows by insertion, and evolves entries in place.
//!
//! Pools persist as line-oriented JSON: one header line followed by one line
//! per entry in ascending id order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};

pub type MemoryId = u64;

pub const POOL_SCHEMA_VERSION: u32 = 1;

/// The two texts an extraction produces for a window of interactions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternText {
    behavior_explanation: String,
    pattern_description: String,
}

impl PatternText {
    pub fn new(
        behavior_explanation: impl Into<String>,
        pattern_description: impl Into<String>,
    ) -> Result<Self> {
        let text = Self {
            behavior_explanation: behavior_explanation.into(),
            pattern_description: pattern_description.into(),
        };
        text.validate()?;
        Ok(text)
    }

    fn validate(&self) -> Result<()> {
        if self.behavior_explanation.trim().is_empty() {
            return Err(Error::InvalidPattern("empty behavior_explanation".into()));
        }
        if self.pattern_description.trim().is_empty() {
            return Err(Error::InvalidPattern("empty pattern_description".into()));
        }
        Ok(())
    }

    pub fn behavior_explanation(&self) -> &str {
        &self.behavior_explanation
    }

    pub fn pattern_description(&self) -> &str {
        &self.pattern_description
    }

    /// Text fed to the encoder: behavior explanation, a space, pattern description.
    pub fn encoding_text(&self) -> String {
        format!("{} {}", self.behavior_explanation, self.pattern_description)
    }
}

/// Where a memory came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_user: String,
    pub source_window_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: MemoryId,
    #[serde(flatten)]
    pub pattern: PatternText,
    pub embedding: Embedding,
    pub evolution_count: u32,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub created_step: u64,
    pub updated_step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolHeader {
    schema: u32,
    dim: Option<usize>,
    next_id: MemoryId,
    step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

/// The memory pool. Iteration is always in ascending id order.
///
/// `step` is a mutation clock: every insert and every replace stamps the
/// current value onto the entry and then advances it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryPool {
    entries: BTreeMap<MemoryId, MemoryEntry>,
    dim: Option<usize>,
    next_id: MemoryId,
    step: u64,
    config_hash: Option<String>,
}

impl MemoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Embedding dimension, fixed by the first insert.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn next_id(&self) -> MemoryId {
        self.next_id
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.config_hash.as_deref()
    }

    /// Tags the pool with the hash of the run configuration that produced it.
    pub fn set_config_hash(&mut self, hash: impl Into<String>) {
        self.config_hash = Some(hash.into());
    }

    pub fn get(&self, id: MemoryId) -> Option<&MemoryEntry> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryEntry> + '_ {
        self.entries.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = MemoryId> + '_ {
        self.entries.keys().copied()
    }

    pub fn total_evolutions(&self) -> u64 {
        self.iter().map(|e| u64::from(e.evolution_count)).sum()
    }

    pub fn max_evolution_count(&self) -> u32 {
        self.iter().map(|e| e.evolution_count).max().unwrap_or(0)
    }

    fn check_dim(&self, embedding: &Embedding) -> Result<()> {
        match self.dim {
            Some(expected) if expected != embedding.dim() => Err(Error::DimensionMismatch {
                expected,
                actual: embedding.dim(),
            }),
            _ => Ok(()),
        }
    }

    pub fn insert(
        &mut self,
        pattern: PatternText,
        embedding: Embedding,
        provenance: Provenance,
    ) -> Result<MemoryId> {
        pattern.validate()?;
        self.check_dim(&embedding)?;
        self.dim.get_or_insert(embedding.dim());

        let id = self.next_id;
        let step = self.step;
        self.entries.insert(
            id,
            MemoryEntry {
                id,
                pattern,
                embedding,
                evolution_count: 0,
                provenance,
                created_step: step,
                updated_step: step,
            },
        );
        self.next_id += 1;
        self.step += 1;
        Ok(id)
    }

    /// Evolves an entry in place: new text and embedding, same id and provenance.
    pub fn replace(
        &mut self,
        id: MemoryId,
        new_pattern: PatternText,
        new_embedding: Embedding,
    ) -> Result<&MemoryEntry> {
        new_pattern.validate()?;
        self.check_dim(&new_embedding)?;
        let step = self.step;
        let entry = self.entries.get_mut(&id).ok_or(Error::UnknownMemory(id))?;
        entry.pattern = new_pattern;
        entry.embedding = new_embedding;
        entry.evolution_count += 1;
        entry.updated_step = step;
        self.step += 1;
        Ok(entry)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = PoolHeader {
            schema: POOL_SCHEMA_VERSION,
            dim: self.dim,
            next_id: self.next_id,
            step: self.step,
            config_hash: self.config_hash.clone(),
        };
        let write = |out: &mut BufWriter<File>, line: String| -> std::io::Result<()> {
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")
        };
        write(&mut out, to_line(&header)).map_err(|e| Error::io(path, e))?;
        for entry in self.iter() {
            write(&mut out, to_line(entry)).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |line: usize, reason: String| Error::CorruptRecord {
            path: path.to_path_buf(),
            line,
            reason,
        };

        let mut lines = BufReader::new(file).lines();
        let header_line = match lines.next() {
            Some(line) => line.map_err(|e| Error::io(path, e))?,
            None => return Err(corrupt(1, "missing header".into())),
        };
        let raw: serde_json::Value =
            serde_json::from_str(&header_line).map_err(|e| corrupt(1, e.to_string()))?;
        let schema = raw.get("schema").and_then(|v| v.as_u64());
        if schema != Some(u64::from(POOL_SCHEMA_VERSION)) {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                found: schema.unwrap_or(0) as u32,
                expected: POOL_SCHEMA_VERSION,
            });
        }
        let header: PoolHeader =
            serde_json::from_value(raw).map_err(|e| corrupt(1, e.to_string()))?;

        let mut entries = BTreeMap::new();
        let mut last_line = 1;
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            last_line = line_no;
            let line = line.map_err(|e| Error::io(path, e))?;
            let entry: MemoryEntry =
                serde_json::from_str(&line).map_err(|e| corrupt(line_no, e.to_string()))?;
            entry
                .pattern
                .validate()
                .map_err(|e| corrupt(line_no, e.to_string()))?;
            Embedding::new(entry.embedding.as_slice().to_vec())
                .map_err(|e| corrupt(line_no, e.to_string()))?;
            if header.dim != Some(entry.embedding.dim()) {
                return Err(corrupt(
                    line_no,
                    format!(
                        "embedding has {} components, header declares {:?}",
                        entry.embedding.dim(),
                        header.dim
                    ),
                ));
            }
            if entry.id >= header.next_id || entry.updated_step < entry.created_step {
                return Err(corrupt(line_no, format!("inconsistent entry {}", entry.id)));
            }
            if let Some(prev) = entries.keys().next_back() {
                if entry.id <= *prev {
                    return Err(corrupt(line_no, format!("id {} out of order", entry.id)));
                }
            }
            entries.insert(entry.id, entry);
        }

        // Entries are never deleted, so a complete file holds exactly next_id records.
        if entries.len() as u64 != header.next_id {
            return Err(corrupt(
                last_line + 1,
                format!(
                    "truncated: header declares {} entries, found {}",
                    header.next_id,
                    entries.len()
                ),
            ));
        }

        Ok(Self {
            entries,
            dim: header.dim,
            next_id: header.next_id,
            step: header.step,
            config_hash: header.config_hash,
        })
    }
}

fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("pool records serialize infallibly")
}
