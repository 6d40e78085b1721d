//! Ranking metrics, evaluation runs, ablations, and pool analysis exports.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EvalInstance, UserHistory};
use crate::error::{Error, Result};
use crate::memory::{MemoryId, MemoryPool};
use crate::pipeline::{Pipeline, TrainOptions, TrainingReport, Variant};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_HISTOGRAM_EDGES: [u32; 6] = [0, 1, 2, 3, 5, 10];

/// NDCG@K with a single relevant item: `1 / log2(r + 1)` when its 1-based
/// rank `r` is at most `k`, otherwise 0.
pub fn ndcg_at_k(ranked: &[String], ground_truth: &str, k: usize) -> Result<f64> {
    let pos = ranked
        .iter()
        .position(|id| id == ground_truth)
        .ok_or_else(|| Error::GroundTruthMissing(ground_truth.to_string()))?;
    let rank = pos + 1;
    Ok(if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user_id: String,
    pub ground_truth: String,
    pub rank: usize,
    pub ndcg: IndexMap<String, f64>,
    pub memory_ids: Vec<MemoryId>,
    pub repairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserFailure {
    pub user_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub n_users: usize,
    pub n_failed: usize,
    /// Means over users that ranked successfully; 0 when none did.
    pub ndcg: IndexMap<String, f64>,
    pub per_user: Vec<UserResult>,
    pub n_repaired: usize,
    pub failures: Vec<UserFailure>,
}

impl MetricsReport {
    pub fn mean(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k.to_string()).copied()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}{:<8}", "users", "failed");
        for k in self.ndcg.keys() {
            let _ = write!(out, "{:>10}", format!("NDCG@{k}"));
        }
        out.push('\n');
        let _ = write!(out, "{:<8}{:<8}", self.n_users, self.n_failed);
        for v in self.ndcg.values() {
            let _ = write!(out, "{v:>10.4}");
        }
        out.push('\n');
        out
    }
}

/// Ranks every instance's candidates against a read-only pool.
///
/// Users fan out over the current rayon pool. Failed users are reported and
/// left out of the means, which are summed in user-id order so the result
/// does not depend on scheduling.
pub fn evaluate(
    pipeline: &Pipeline,
    pool: &MemoryPool,
    instances: &[EvalInstance],
    ks: &[usize],
) -> MetricsReport {
    let outcomes: Vec<std::result::Result<UserResult, UserFailure>> = instances
        .par_iter()
        .map(|inst| {
            let ranked = pipeline
                .rank_for_user(
                    pool,
                    &inst.train_history,
                    &inst.candidates,
                    Some(&inst.ground_truth.item_id),
                )
                .and_then(|r| {
                    let mut ndcg = IndexMap::new();
                    for &k in ks {
                        ndcg.insert(
                            k.to_string(),
                            ndcg_at_k(&r.ranked_ids, &inst.ground_truth.item_id, k)?,
                        );
                    }
                    let rank = r
                        .ranked_ids
                        .iter()
                        .position(|id| *id == inst.ground_truth.item_id)
                        .map_or(0, |p| p + 1);
                    Ok(UserResult {
                        user_id: inst.user_id.clone(),
                        ground_truth: inst.ground_truth.item_id.clone(),
                        rank,
                        ndcg,
                        memory_ids: r.memory_ids,
                        repairs: r.repairs.count(),
                    })
                });
            ranked.map_err(|e| {
                log::warn!("ranking failed for user {}: {e}", inst.user_id);
                UserFailure {
                    user_id: inst.user_id.clone(),
                    error: e.to_string(),
                }
            })
        })
        .collect();

    let mut per_user = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => per_user.push(r),
            Err(f) => failures.push(f),
        }
    }
    let mut order: Vec<&UserResult> = per_user.iter().collect();
    order.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let mut ndcg = IndexMap::new();
    for &k in ks {
        let key = k.to_string();
        let sum: f64 = order.iter().map(|r| r.ndcg[&key]).sum();
        let mean = if order.is_empty() {
            0.0
        } else {
            sum / order.len() as f64
        };
        ndcg.insert(key, mean);
    }
    MetricsReport {
        config_hash: pipeline.config_hash().to_string(),
        n_users: instances.len(),
        n_failed: failures.len(),
        ndcg,
        n_repaired: per_user.iter().filter(|r| r.repairs > 0).count(),
        per_user,
        failures,
    }
}

/// Runs `f` on a dedicated pool of `jobs` threads, or on the global pool
/// when `jobs` is `None`.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::InvalidInput(format!("cannot start {n} worker threads: {e}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub lo: u32,
    /// Exclusive upper bound; `None` for the open last bucket.
    pub hi: Option<u32>,
    pub count: usize,
}

impl HistogramBucket {
    pub fn label(&self) -> String {
        match self.hi {
            None => format!("{}+", self.lo),
            Some(hi) if hi == self.lo + 1 => self.lo.to_string(),
            Some(hi) => format!("{}-{}", self.lo, hi - 1),
        }
    }
}

/// Buckets `[e0, e1), [e1, e2), …, [en, ∞)`. Edges must start at 0 and
/// increase strictly. An empty pool gives an empty histogram.
pub fn evolution_histogram(pool: &MemoryPool, edges: &[u32]) -> Result<Vec<HistogramBucket>> {
    if edges.first() != Some(&0) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(format!(
            "histogram edges must start at 0 and increase strictly, got {edges:?}"
        )));
    }
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let mut buckets: Vec<HistogramBucket> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| HistogramBucket {
            lo,
            hi: edges.get(i + 1).copied(),
            count: 0,
        })
        .collect();
    for entry in pool.iter() {
        let i = edges.partition_point(|&e| e <= entry.evolution_count) - 1;
        buckets[i].count += 1;
    }
    Ok(buckets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub size: usize,
    pub total_evolutions: u64,
    pub max_evolution_count: u32,
    pub histogram: Vec<HistogramBucket>,
}

impl PoolStats {
    pub fn of(pool: &MemoryPool) -> Self {
        Self {
            size: pool.len(),
            total_evolutions: pool.total_evolutions(),
            max_evolution_count: pool.max_evolution_count(),
            histogram: evolution_histogram(pool, &DEFAULT_HISTOGRAM_EDGES)
                .expect("default edges are valid"),
        }
    }
}

/// Tab-separated: a header, then `id`, `evolution_count`, and every
/// embedding component per entry.
pub fn export_embeddings(pool: &MemoryPool, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = String::from("id\tevolution_count");
    for i in 0..pool.dim().unwrap_or(0) {
        let _ = write!(header, "\te{i}");
    }
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    for entry in pool.iter() {
        let mut line = format!("{}\t{}", entry.id, entry.evolution_count);
        for v in entry.embedding.as_slice() {
            let _ = write!(line, "\t{v}");
        }
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub training: Option<TrainingReport>,
    pub pool: Option<PoolStats>,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
    #[serde(skip)]
    pub final_pool: Option<MemoryPool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<VariantRun>,
}

impl AblationReport {
    pub fn get(&self, variant: Variant) -> Option<&VariantRun> {
        self.variants.iter().find(|v| v.variant == variant)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<26}{:>8}{:>10}{:>10}{:>10}{:>10}",
            "variant", "memories", "evolved", "NDCG@1", "NDCG@5", "NDCG@10"
        );
        for v in &self.variants {
            match (&v.pool, &v.metrics) {
                (Some(p), Some(m)) => {
                    let cell = |k| m.mean(k).map_or("-".to_string(), |x| format!("{x:.4}"));
                    let _ = writeln!(
                        out,
                        "{:<26}{:>8}{:>10}{:>10}{:>10}{:>10}",
                        v.variant.name(),
                        p.size,
                        p.total_evolutions,
                        cell(1),
                        cell(5),
                        cell(10)
                    );
                }
                _ => {
                    let _ = writeln!(
                        out,
                        "{:<26}failed: {}",
                        v.variant.name(),
                        v.error.as_deref().unwrap_or("unknown")
                    );
                }
            }
        }
        out
    }
}

/// Trains and evaluates each variant on the same users and instances.
/// A failing variant is recorded and the others still run.
pub fn run_ablation_suite(
    variants: &[Variant],
    train_users: &[UserHistory],
    instances: &[EvalInstance],
    ks: &[usize],
    make_pipeline: impl Fn(Variant) -> Result<Pipeline>,
) -> AblationReport {
    let runs = variants
        .iter()
        .map(|&variant| {
            let outcome = make_pipeline(variant).and_then(|pipeline| {
                let mut pool = MemoryPool::new();
                let training = pipeline.train(&mut pool, train_users, &TrainOptions::default())?;
                let metrics = evaluate(&pipeline, &pool, instances, ks);
                Ok((training, pool, metrics))
            });
            match outcome {
                Ok((training, pool, metrics)) => VariantRun {
                    variant,
                    training: Some(training),
                    pool: Some(PoolStats::of(&pool)),
                    metrics: Some(metrics),
                    error: None,
                    final_pool: Some(pool),
                },
                Err(e) => {
                    log::error!("variant {} failed: {e}", variant.name());
                    VariantRun {
                        variant,
                        training: None,
                        pool: None,
                        metrics: None,
                        error: Some(e.to_string()),
                        final_pool: None,
                    }
                }
            }
        })
        .collect();
    AblationReport { variants: runs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Embedding, Encoder, HashEncoder};
    use crate::memory::{PatternText, Provenance};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("i{i}")).collect()
    }

    #[test]
    fn ndcg_hand_values() {
        let r = ids(20);
        assert_eq!(ndcg_at_k(&r, "i0", 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&r, "i2", 5).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&r, "i10", 10).unwrap(), 0.0);
        assert!(matches!(
            ndcg_at_k(&r, "zz", 10),
            Err(Error::GroundTruthMissing(_))
        ));
    }

    fn pool_with_counts(counts: &[u32]) -> MemoryPool {
        let encoder = HashEncoder::default();
        let mut pool = MemoryPool::new();
        for (i, &c) in counts.iter().enumerate() {
            let text = PatternText::new(format!("b{i}"), format!("p{i}")).unwrap();
            let emb = encoder.encode(&text.encoding_text()).unwrap();
            let id = pool
                .insert(
                    text.clone(),
                    emb.clone(),
                    Provenance {
                        source_user: "u".into(),
                        source_window_index: i,
                    },
                )
                .unwrap();
            for _ in 0..c {
                pool.replace(id, text.clone(), emb.clone()).unwrap();
            }
        }
        pool
    }

    #[test]
    fn histogram_buckets() {
        let pool = pool_with_counts(&[0, 0, 3]);
        let h = evolution_histogram(&pool, &[0, 1, 3]).unwrap();
        let counts: Vec<usize> = h.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![2, 0, 1]);
        let labels: Vec<String> = h.iter().map(HistogramBucket::label).collect();
        assert_eq!(labels, vec!["0", "1-2", "3+"]);
        assert!(evolution_histogram(&MemoryPool::new(), &[0, 1])
            .unwrap()
            .is_empty());
        assert!(evolution_histogram(&pool, &[1, 2]).is_err());
        assert!(evolution_histogram(&pool, &[0, 2, 2]).is_err());
    }

    #[test]
    fn export_round_trips_components() {
        let pool = pool_with_counts(&[0, 2, 1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        export_embeddings(&pool, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("id\tevolution_count\te0\te1"));
        for (line, entry) in lines[1..].iter().zip(pool.iter()) {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols[0].parse::<u64>().unwrap(), entry.id);
            assert_eq!(cols[1].parse::<u32>().unwrap(), entry.evolution_count);
            let values: Vec<f64> = cols[2..].iter().map(|c| c.parse().unwrap()).collect();
            assert_eq!(Embedding::new(values).unwrap(), entry.embedding);
        }

        export_embeddings(&MemoryPool::new(), &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "id\tevolution_count\n"
        );
    }
}
