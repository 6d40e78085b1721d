//! Training and inference orchestration.
//!
//! Training is single-pass and strictly sequential: users in input order,
//! windows in temporal order, each window seeing every earlier mutation.
//! [`Pipeline::process_window`] is the only place the pool is mutated, and it
//! records every mutation as a [`PoolOp`] so a run can be replayed onto an
//! empty pool.
//!
//! Inference reads the pool and never writes it, so it can fan out across
//! users freely.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentGateway, ProviderConfig, RepairReport, TemplateSet};
use crate::dataset::{Interaction, Item, UserHistory};
use crate::embedding::{
    top_k, Embedding, Encoder, HashEncoder, HttpEncoder, HttpEncoderConfig, ScoredNeighbor,
    DEFAULT_DIM,
};
use crate::error::{Error, Result};
use crate::memory::{MemoryEntry, MemoryId, MemoryPool, PatternText, Provenance};
use crate::policy::{BranchConstants, PolicyDecision, SimilarityValidator, Strategy, Thresholds};
use crate::sha256_hex;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_similarity_validator: bool,
    pub no_semantic_validator: bool,
    pub no_evolution: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSimilarityValidator,
    NoSemanticValidator,
    NoEvolution,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoSimilarityValidator,
        Variant::NoSemanticValidator,
        Variant::NoEvolution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSimilarityValidator => "no_similarity_validator",
            Variant::NoSemanticValidator => "no_semantic_validator",
            Variant::NoEvolution => "no_evolution",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn ablations(self) -> Ablations {
        Ablations {
            no_similarity_validator: self == Variant::NoSimilarityValidator,
            no_semantic_validator: self == Variant::NoSemanticValidator,
            no_evolution: self == Variant::NoEvolution,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    Hash { dim: usize },
    Http(HttpEncoderConfig),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Hash { dim: DEFAULT_DIM }
    }
}

impl EncoderConfig {
    pub fn build(&self) -> Result<Arc<dyn Encoder>> {
        Ok(match self {
            EncoderConfig::Hash { dim } => Arc::new(HashEncoder::new(*dim)?),
            EncoderConfig::Http(cfg) => Arc::new(HttpEncoder::new(cfg.clone())?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub window_size: usize,
    pub link_top_k: usize,
    pub memory_top_k: usize,
    /// How many of the most recent history items the ranking prompt shows.
    pub profile_length: usize,
    pub thresholds: Thresholds,
    pub branches: BranchConstants,
    pub ablations: Ablations,
    pub seed: u64,
    /// Whether an update that leaves both texts unchanged still counts as an evolution.
    pub count_null_evolutions: bool,
    /// Whether an evolved entry gets a fresh embedding of its new text.
    pub reembed_on_evolution: bool,
    pub parse_retry_budget: usize,
    pub provider: ProviderConfig,
    pub encoder: EncoderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            window_size: 3,
            link_top_k: 5,
            memory_top_k: 5,
            profile_length: 10,
            thresholds: Thresholds::default(),
            branches: BranchConstants::default(),
            ablations: Ablations::default(),
            seed: 42,
            count_null_evolutions: true,
            reembed_on_evolution: true,
            parse_retry_budget: crate::agent::DEFAULT_PARSE_RETRY_BUDGET,
            provider: ProviderConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("window_size", self.window_size),
            ("link_top_k", self.link_top_k),
            ("memory_top_k", self.memory_top_k),
            ("profile_length", self.profile_length),
        ] {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be at least 1")));
            }
        }
        self.thresholds.validate()
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            ablations: variant.ablations(),
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn config_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Contiguous windows with stride 1. A history shorter than `w` yields one
/// window holding all of it; an empty history yields none.
pub fn sliding_windows(history: &[Interaction], w: usize) -> Vec<&[Interaction]> {
    if history.is_empty() || w == 0 {
        return Vec::new();
    }
    if history.len() <= w {
        return vec![history];
    }
    history.windows(w).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PoolOp {
    Insert {
        id: MemoryId,
        pattern: PatternText,
        embedding: Embedding,
        provenance: Provenance,
    },
    Replace {
        id: MemoryId,
        pattern: PatternText,
        embedding: Embedding,
    },
}

impl PoolOp {
    pub fn apply(&self, pool: &mut MemoryPool) -> Result<()> {
        match self {
            PoolOp::Insert {
                id,
                pattern,
                embedding,
                provenance,
            } => {
                let got = pool.insert(pattern.clone(), embedding.clone(), provenance.clone())?;
                if got != *id {
                    return Err(Error::InvalidInput(format!(
                        "replayed insert produced id {got}, trace says {id}"
                    )));
                }
                Ok(())
            }
            PoolOp::Replace {
                id,
                pattern,
                embedding,
            } => pool
                .replace(*id, pattern.clone(), embedding.clone())
                .map(|_| ()),
        }
    }
}

/// Rebuilds a pool from recorded operations.
pub fn replay<'a>(ops: impl IntoIterator<Item = &'a PoolOp>) -> Result<MemoryPool> {
    let mut pool = MemoryPool::new();
    for op in ops {
        op.apply(&mut pool)?;
    }
    Ok(pool)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowTrace {
    pub user_id: String,
    pub window_index: usize,
    pub item_ids: Vec<String>,
    pub pattern: Option<PatternText>,
    pub neighbors: Vec<ScoredNeighbor>,
    pub decision: Option<PolicyDecision>,
    pub update_candidates: Vec<MemoryId>,
    pub linked_ids: Vec<MemoryId>,
    pub evolved_ids: Vec<MemoryId>,
    pub stored_id: Option<MemoryId>,
    pub ops: Vec<PoolOp>,
}

impl WindowTrace {
    pub fn inserts(&self) -> usize {
        self.ops
            .iter()
            .filter(|o| matches!(o, PoolOp::Insert { .. }))
            .count()
    }

    pub fn replaces(&self) -> usize {
        self.ops
            .iter()
            .filter(|o| matches!(o, PoolOp::Replace { .. }))
            .count()
    }

    pub fn is_bootstrap(&self) -> bool {
        self.decision.is_some_and(|d| d.evidence.is_none())
    }
}

/// A window that failed part-way, with everything that happened before.
#[derive(Debug)]
pub struct WindowFailure {
    pub trace: Box<WindowTrace>,
    pub error: Error,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub users: usize,
    pub windows: usize,
    pub failed_windows: usize,
    pub inserts: usize,
    pub replaces: usize,
    pub store_only: usize,
    pub update_only: usize,
    pub update_and_store: usize,
    pub links: usize,
    pub dropped_ids: usize,
    pub provider_calls: u64,
}

impl TrainingSummary {
    fn absorb(&mut self, trace: &WindowTrace) {
        self.windows += 1;
        self.inserts += trace.inserts();
        self.replaces += trace.replaces();
        self.links += trace.linked_ids.len();
        match trace.decision.map(|d| d.strategy) {
            Some(Strategy::StoreOnly) => self.store_only += 1,
            Some(Strategy::UpdateOnly) => self.update_only += 1,
            Some(Strategy::UpdateAndStore) => self.update_and_store += 1,
            None => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowError {
    pub user_id: String,
    pub window_index: usize,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config_hash: String,
    pub summary: TrainingSummary,
    pub pool_size: usize,
    pub total_evolutions: u64,
    pub max_evolution_count: u32,
    pub failures: Vec<WindowError>,
    /// Traces of the windows processed in this invocation.
    #[serde(skip)]
    pub traces: Vec<WindowTrace>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `pool.jsonl` and `progress.json`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint after this many users (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    /// Continue from the checkpoint in `checkpoint_dir`.
    pub resume: bool,
    /// Stop cleanly after this many users in total, as if interrupted.
    pub stop_after_users: Option<usize>,
    /// Keep per-window traces in the report.
    pub keep_traces: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub users_done: usize,
    pub config_hash: String,
    #[serde(default)]
    pub summary: TrainingSummary,
    #[serde(default)]
    pub failures: Vec<WindowError>,
}

pub const CHECKPOINT_POOL: &str = "pool.jsonl";
pub const CHECKPOINT_PROGRESS: &str = "progress.json";

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_checkpoint(dir: &Path, pool: &MemoryPool, progress: &Progress) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(CHECKPOINT_POOL), |p| pool.save(p))?;
    write_atomic(&dir.join(CHECKPOINT_PROGRESS), |p| {
        let text = serde_json::to_string_pretty(progress).expect("progress serializes");
        fs::write(p, text).map_err(|e| Error::io(p, e))
    })
}

pub fn load_checkpoint(dir: &Path) -> Result<(MemoryPool, Progress)> {
    let path = dir.join(CHECKPOINT_PROGRESS);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let progress: Progress = serde_json::from_str(&text).map_err(|e| Error::CorruptRecord {
        path: path.clone(),
        line: 1,
        reason: e.to_string(),
    })?;
    let pool = MemoryPool::load(dir.join(CHECKPOINT_POOL))?;
    Ok((pool, progress))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query: String,
    pub memory_ids: Vec<MemoryId>,
    pub ranked_ids: Vec<String>,
    pub repairs: RepairReport,
}

/// The query text for memory retrieval: the last `w` items, most recent
/// first, as `"title (category)"` joined with `"; "`.
pub fn history_query(history: &[Interaction], w: usize) -> String {
    history
        .iter()
        .rev()
        .take(w)
        .map(|i| format!("{} ({})", i.title, i.category))
        .collect::<Vec<_>>()
        .join("; ")
}

pub struct Pipeline {
    config: RunConfig,
    config_hash: String,
    gateway: AgentGateway,
    encoder: Arc<dyn Encoder>,
}

impl Pipeline {
    pub fn new(
        config: RunConfig,
        gateway: AgentGateway,
        encoder: Arc<dyn Encoder>,
    ) -> Result<Self> {
        config.validate()?;
        let config_hash = config.config_hash();
        Ok(Self {
            config,
            config_hash,
            gateway,
            encoder,
        })
    }

    /// Builds the provider and encoder the config describes.
    pub fn from_config(config: RunConfig, templates: TemplateSet) -> Result<Self> {
        let gateway = AgentGateway::new(config.provider.build()?)
            .with_templates(templates)
            .with_parse_retry_budget(config.parse_retry_budget);
        let encoder = config.encoder.build()?;
        Self::new(config, gateway, encoder)
    }

    /// Overrides the hash stamped on checkpoints and reports.
    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = hash.into();
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn gateway(&self) -> &AgentGateway {
        &self.gateway
    }

    fn validator(&self) -> SimilarityValidator {
        SimilarityValidator {
            thresholds: self.config.thresholds,
            branches: self.config.branches,
            enabled: !self.config.ablations.no_similarity_validator,
        }
    }

    pub fn process_window(
        &self,
        pool: &mut MemoryPool,
        user_id: &str,
        window_index: usize,
        window: &[Interaction],
    ) -> std::result::Result<WindowTrace, WindowFailure> {
        let mut trace = WindowTrace {
            user_id: user_id.to_string(),
            window_index,
            item_ids: window.iter().map(|i| i.item_id.clone()).collect(),
            ..WindowTrace::default()
        };
        match self.run_window(pool, window, &mut trace) {
            Ok(()) => Ok(trace),
            Err(error) => Err(WindowFailure {
                trace: Box::new(trace),
                error,
            }),
        }
    }

    fn run_window(
        &self,
        pool: &mut MemoryPool,
        window: &[Interaction],
        trace: &mut WindowTrace,
    ) -> Result<()> {
        let ablations = self.config.ablations;
        let pattern = self.gateway.extract_pattern(window)?;
        trace.pattern = Some(pattern.clone());
        let embedding = self.encoder.encode(&pattern.encoding_text())?;

        let neighbors = if pool.is_empty() {
            Vec::new()
        } else {
            top_k(pool, &embedding, self.config.link_top_k)?
        };
        trace.neighbors = neighbors.clone();
        let scores: Vec<f64> = neighbors.iter().map(|n| n.score).collect();
        let validator = self.validator();
        let mut decision = validator.decide(&scores);
        if ablations.no_evolution {
            decision = PolicyDecision::new(Strategy::StoreOnly, decision.evidence);
        }
        trace.decision = Some(decision);

        if decision.do_update {
            let candidates = validator.update_candidates(&neighbors, &decision)?;
            trace.update_candidates = candidates.iter().map(|n| n.id).collect();
            let linked: Vec<MemoryId> = if candidates.is_empty() {
                Vec::new()
            } else if ablations.no_semantic_validator {
                trace.update_candidates.clone()
            } else {
                let with_entries: Vec<(&MemoryEntry, f64)> = candidates
                    .iter()
                    .map(|n| Ok((pool.get(n.id).ok_or(Error::UnknownMemory(n.id))?, n.score)))
                    .collect::<Result<_>>()?;
                self.gateway
                    .validate_links(&pattern, &with_entries, &decision)?
                    .linked_ids
            };
            trace.linked_ids = linked.clone();
            if !linked.is_empty() {
                self.evolve(pool, &pattern, &linked, trace)?;
            }
        }

        if decision.do_store {
            let provenance = Provenance {
                source_user: trace.user_id.clone(),
                source_window_index: trace.window_index,
            };
            let id = pool.insert(pattern.clone(), embedding.clone(), provenance.clone())?;
            trace.stored_id = Some(id);
            trace.ops.push(PoolOp::Insert {
                id,
                pattern,
                embedding,
                provenance,
            });
        }
        Ok(())
    }

    fn evolve(
        &self,
        pool: &mut MemoryPool,
        pattern: &PatternText,
        linked: &[MemoryId],
        trace: &mut WindowTrace,
    ) -> Result<()> {
        let entries: Vec<&MemoryEntry> = linked
            .iter()
            .map(|id| pool.get(*id).ok_or(Error::UnknownMemory(*id)))
            .collect::<Result<_>>()?;
        let verdict = self.gateway.evolve_memories(pattern, &entries)?;
        if !verdict.should_evolve {
            return Ok(());
        }
        let mut planned = Vec::new();
        for update in &verdict.updates {
            if !update.changes_text() && !self.config.count_null_evolutions {
                continue;
            }
            let entry = pool.get(update.id).ok_or(Error::UnknownMemory(update.id))?;
            let text = update.apply_to(&entry.pattern)?;
            let embedding = if self.config.reembed_on_evolution {
                self.encoder.encode(&text.encoding_text())?
            } else {
                entry.embedding.clone()
            };
            planned.push((update.id, text, embedding));
        }
        for (id, text, embedding) in planned {
            pool.replace(id, text.clone(), embedding.clone())?;
            trace.evolved_ids.push(id);
            trace.ops.push(PoolOp::Replace {
                id,
                pattern: text,
                embedding,
            });
        }
        Ok(())
    }

    /// Single pass over `users`. Parse failures skip the window and are
    /// reported; any other error aborts training.
    pub fn train(
        &self,
        pool: &mut MemoryPool,
        users: &[UserHistory],
        options: &TrainOptions,
    ) -> Result<TrainingReport> {
        let mut report = TrainingReport {
            config_hash: self.config_hash.clone(),
            ..TrainingReport::default()
        };
        let mut start = 0;
        if options.resume {
            let dir = options
                .checkpoint_dir
                .as_deref()
                .ok_or_else(|| Error::InvalidInput("resume needs a checkpoint directory".into()))?;
            let (saved, progress) = load_checkpoint(dir)?;
            if progress.config_hash != self.config_hash {
                return Err(Error::CheckpointMismatch {
                    found: progress.config_hash,
                    expected: self.config_hash.clone(),
                });
            }
            *pool = saved;
            start = progress.users_done.min(users.len());
            report.summary = progress.summary;
            report.failures = progress.failures;
            log::info!("resuming after {start} users");
        } else if !pool.is_empty() {
            return Err(Error::InvalidInput(
                "training starts from an empty pool".into(),
            ));
        }
        pool.set_config_hash(self.config_hash.clone());

        let calls_before = self.gateway.call_count();
        let calls_carried = report.summary.provider_calls;
        let end = options
            .stop_after_users
            .map_or(users.len(), |n| n.min(users.len()));
        for (index, user) in users.iter().enumerate().take(end).skip(start) {
            for (w, window) in sliding_windows(&user.interactions, self.config.window_size)
                .into_iter()
                .enumerate()
            {
                match self.process_window(pool, &user.user_id, w, window) {
                    Ok(trace) => {
                        report.summary.absorb(&trace);
                        if options.keep_traces {
                            report.traces.push(trace);
                        }
                    }
                    Err(WindowFailure { trace, error }) if matches!(error, Error::Parse { .. }) => {
                        log::warn!("user {} window {w}: {error}", user.user_id);
                        report.summary.failed_windows += 1;
                        report.summary.inserts += trace.inserts();
                        report.summary.replaces += trace.replaces();
                        report.failures.push(WindowError {
                            user_id: user.user_id.clone(),
                            window_index: w,
                            error: error.to_string(),
                        });
                        if options.keep_traces {
                            report.traces.push(*trace);
                        }
                    }
                    Err(WindowFailure { error, .. }) => {
                        return Err(Error::TrainingAborted {
                            user: user.user_id.clone(),
                            window: w,
                            source: Box::new(error),
                        })
                    }
                }
            }
            report.summary.users += 1;
            report.summary.provider_calls =
                calls_carried + (self.gateway.call_count() - calls_before);
            let done = index + 1;
            if let Some(dir) = &options.checkpoint_dir {
                let periodic = options.checkpoint_every > 0 && done % options.checkpoint_every == 0;
                if periodic || done == end {
                    write_checkpoint(
                        dir,
                        pool,
                        &Progress {
                            users_done: done,
                            config_hash: self.config_hash.clone(),
                            summary: report.summary.clone(),
                            failures: report.failures.clone(),
                        },
                    )?;
                }
            }
        }
        report.pool_size = pool.len();
        report.total_evolutions = pool.total_evolutions();
        report.max_evolution_count = pool.max_evolution_count();
        Ok(report)
    }

    /// Retrieves memories for `history` and asks the model to order `candidates`.
    pub fn rank_for_user(
        &self,
        pool: &MemoryPool,
        history: &[Interaction],
        candidates: &[Item],
        oracle_hint: Option<&str>,
    ) -> Result<RankingResult> {
        let query = history_query(history, self.config.window_size);
        let memories: Vec<&MemoryEntry> = if pool.is_empty() || query.is_empty() {
            Vec::new()
        } else {
            let q = self.encoder.encode(&query)?;
            top_k(pool, &q, self.config.memory_top_k)?
                .iter()
                .map(|n| pool.get(n.id).ok_or(Error::UnknownMemory(n.id)))
                .collect::<Result<_>>()?
        };
        let profile: Vec<Interaction> = history
            .iter()
            .rev()
            .take(self.config.profile_length)
            .cloned()
            .collect();
        let texts: Vec<PatternText> = memories.iter().map(|m| m.pattern.clone()).collect();
        let ranked = self
            .gateway
            .rank_candidates(&profile, &texts, candidates, oracle_hint)?;
        Ok(RankingResult {
            query,
            memory_ids: memories.iter().map(|m| m.id).collect(),
            ranked_ids: ranked.ranked_ids,
            repairs: ranked.repairs,
        })
    }
}
