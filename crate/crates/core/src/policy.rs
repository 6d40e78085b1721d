//! Soft-threshold similarity validator.
//!
//! The top-k neighbor scores of a new memory are bucketed against two
//! thresholds (`high`: s >= tau_high, `medium`: tau_low <= s < tau_high,
//! `low`: s < tau_low) and the resulting proportions, together with the
//! maximum score, select one of three strategies:
//!
//! | condition                                    | strategy           |
//! |----------------------------------------------|--------------------|
//! | s_max < tau_low                              | `STORE_ONLY`       |
//! | tau_low <= s_max < tau_high                  | `UPDATE_AND_STORE` |
//! | s_max >= tau_high and p_high >= 0.6          | `UPDATE_ONLY`      |
//! | s_max >= tau_high and p_low >= 0.5           | `STORE_ONLY`       |
//! | otherwise                                    | `UPDATE_AND_STORE` |
//!
//! Rows are evaluated top to bottom; the first match wins.

use serde::{Deserialize, Serialize};

use crate::embedding::ScoredNeighbor;
use crate::error::{Error, Result};

const SCORE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_low: f64,
    pub tau_high: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_low: 0.55,
            tau_high: 0.9,
        }
    }
}

impl Thresholds {
    pub fn new(tau_low: f64, tau_high: f64) -> Result<Self> {
        let t = Self { tau_low, tau_high };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if in_unit(self.tau_low) && in_unit(self.tau_high) && self.tau_low < self.tau_high {
            Ok(())
        } else {
            Err(Error::InvalidThresholds {
                tau_low: self.tau_low,
                tau_high: self.tau_high,
            })
        }
    }
}

/// Proportion cut-offs used by the two `s_max >= tau_high` branches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConstants {
    pub min_high_for_update_only: f64,
    pub min_low_for_store_only: f64,
}

impl Default for BranchConstants {
    fn default() -> Self {
        Self {
            min_high_for_update_only: 0.6,
            min_low_for_store_only: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    StoreOnly,
    UpdateAndStore,
    UpdateOnly,
}

impl Strategy {
    pub fn do_update(self) -> bool {
        matches!(self, Strategy::UpdateAndStore | Strategy::UpdateOnly)
    }

    pub fn do_store(self) -> bool {
        matches!(self, Strategy::StoreOnly | Strategy::UpdateAndStore)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::StoreOnly => "STORE_ONLY",
            Strategy::UpdateAndStore => "UPDATE_AND_STORE",
            Strategy::UpdateOnly => "UPDATE_ONLY",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub s_max: f64,
    pub p_high: f64,
    pub p_medium: f64,
    pub p_low: f64,
    pub k_effective: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub strategy: Strategy,
    pub do_update: bool,
    pub do_store: bool,
    /// `None` only for the empty-pool bootstrap.
    pub evidence: Option<ScoreDistribution>,
}

impl PolicyDecision {
    pub fn new(strategy: Strategy, evidence: Option<ScoreDistribution>) -> Self {
        Self {
            strategy,
            do_update: strategy.do_update(),
            do_store: strategy.do_store(),
            evidence,
        }
    }
}

fn distribution(scores: &[f64], t: &Thresholds) -> ScoreDistribution {
    let k = scores.len();
    let (mut high, mut medium, mut low) = (0usize, 0usize, 0usize);
    let mut s_max = f64::NEG_INFINITY;
    for &s in scores {
        s_max = s_max.max(s);
        if s >= t.tau_high {
            high += 1;
        } else if s >= t.tau_low {
            medium += 1;
        } else {
            low += 1;
        }
    }
    let kf = k as f64;
    ScoreDistribution {
        s_max,
        p_high: high as f64 / kf,
        p_medium: medium as f64 / kf,
        p_low: low as f64 / kf,
        k_effective: k,
    }
}

pub fn score_distribution(scores: &[f64], t: &Thresholds) -> Result<ScoreDistribution> {
    if scores.is_empty() {
        return Err(Error::InvalidInput(
            "score distribution of an empty list".into(),
        ));
    }
    if let Some(s) = scores
        .iter()
        .find(|s| s.is_nan() || s.abs() > 1.0 + SCORE_TOLERANCE)
    {
        return Err(Error::InvalidInput(format!("score {s} outside [-1, 1]")));
    }
    Ok(distribution(scores, t))
}

pub fn decide(scores: &[f64], t: &Thresholds, branches: &BranchConstants) -> PolicyDecision {
    if scores.is_empty() {
        return PolicyDecision::new(Strategy::StoreOnly, None);
    }
    let d = distribution(scores, t);
    let strategy = if d.s_max < t.tau_low {
        Strategy::StoreOnly
    } else if d.s_max < t.tau_high {
        Strategy::UpdateAndStore
    } else if d.p_high >= branches.min_high_for_update_only {
        Strategy::UpdateOnly
    } else if d.p_low >= branches.min_low_for_store_only {
        Strategy::StoreOnly
    } else {
        Strategy::UpdateAndStore
    };
    PolicyDecision::new(strategy, Some(d))
}

/// Neighbors eligible for linking: those scoring at least `tau_low`, in the
/// order given.
pub fn update_candidates(
    neighbors: &[ScoredNeighbor],
    decision: &PolicyDecision,
    t: &Thresholds,
) -> Result<Vec<ScoredNeighbor>> {
    if !decision.do_update {
        return Err(Error::InvalidInput(format!(
            "update candidates requested for a {} decision",
            decision.strategy.as_str()
        )));
    }
    Ok(neighbors
        .iter()
        .filter(|n| n.score >= t.tau_low)
        .copied()
        .collect())
}

/// The validator as the pipeline uses it. With `enabled = false` every
/// non-empty neighborhood is updated and stored, and all neighbors become
/// update candidates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityValidator {
    pub thresholds: Thresholds,
    pub branches: BranchConstants,
    pub enabled: bool,
}

impl SimilarityValidator {
    pub fn decide(&self, scores: &[f64]) -> PolicyDecision {
        let decision = decide(scores, &self.thresholds, &self.branches);
        if self.enabled || scores.is_empty() {
            decision
        } else {
            PolicyDecision::new(Strategy::UpdateAndStore, decision.evidence)
        }
    }

    pub fn update_candidates(
        &self,
        neighbors: &[ScoredNeighbor],
        decision: &PolicyDecision,
    ) -> Result<Vec<ScoredNeighbor>> {
        if self.enabled {
            update_candidates(neighbors, decision, &self.thresholds)
        } else if decision.do_update {
            Ok(neighbors.to_vec())
        } else {
            update_candidates(neighbors, decision, &self.thresholds)
        }
    }
}
