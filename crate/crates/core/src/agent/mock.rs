//! Deterministic stand-in for the language model.
//!
//! Every response is a pure function of the request payload, so the rules
//! below can be checked by hand.
//!
//! Tokens are lowercase runs of alphanumerics and `_`, at least two
//! characters long, minus [`STOPWORDS`]. A category becomes a single token by
//! lowercasing it and collapsing every run of other characters to `_`
//! (`"Video Games"` becomes `video_games`).
//!
//! * **Extraction**: `behavior_explanation` is `"Prefers "` followed by the
//!   window's category tokens, sorted and joined with `", "`, then `"."`.
//!   `pattern_description` is `"Sequence: "` followed by each item's title
//!   tokens (or its category token when the title has none) joined with
//!   `" -> "` in window order, then `"."`.
//! * **Linking**: the dominant token is the most frequent token of the new
//!   behavior explanation (ties go to the lexicographically smallest). A
//!   candidate is linked when its combined text contains that token. In
//!   [`MockLinking::All`] mode every candidate is linked.
//! * **Evolution**: for every candidate, the distinct tokens of the new
//!   behavior explanation that the candidate's text lacks are appended to its
//!   pattern description as `" Also: a, b."`. Candidates missing nothing get
//!   an update with both fields null. `should_evolve` is true whenever there
//!   is at least one candidate.
//! * **Ranking**: candidates are ordered by the number of their tokens
//!   (title tokens plus category token) found among the history's title and
//!   category tokens and the memory texts' tokens, descending, ties by input
//!   order. [`MockRanking::Oracle`] then moves the held-out item to the front
//!   and [`MockRanking::Adversarial`] moves it to the back.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::provider::{AgentRequest, LlmProvider};
use super::{EvolvePayload, ExtractPayload, LinkPayload, Payload, RankPayload};
use crate::embedding::word_tokens;
use crate::error::Result;

pub const STOPWORDS: &[&str] = &[
    "prefers", "sequence", "also", "and", "the", "then", "with", "for", "of", "to", "in", "on",
    "a", "an",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockLinking {
    #[default]
    SharedCategory,
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockRanking {
    #[default]
    Overlap,
    Oracle,
    Adversarial,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub linking: MockLinking,
    pub ranking: MockRanking,
}

#[derive(Clone, Debug, Default)]
pub struct MockProvider {
    config: MockConfig,
}

pub fn mock_tokens(text: &str) -> Vec<String> {
    word_tokens(text)
        .into_iter()
        .filter(|t| t.chars().count() >= 2 && !STOPWORDS.contains(&t.as_str()))
        .collect()
}

pub fn category_token(category: &str) -> String {
    let mut out = String::new();
    let mut gap = false;
    for c in category.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            if gap && !out.is_empty() {
                out.push('_');
            }
            gap = false;
            out.push(c);
        } else {
            gap = true;
        }
    }
    out
}

impl MockProvider {
    pub fn new(config: MockConfig) -> Self {
        Self { config }
    }

    fn extract(&self, p: &ExtractPayload) -> serde_json::Value {
        let mut cats: Vec<String> = p
            .interaction_summary
            .iter()
            .map(|i| category_token(&i.category))
            .collect();
        cats.sort();
        let steps: Vec<String> = p
            .interaction_summary
            .iter()
            .map(|i| {
                let words = mock_tokens(&i.title);
                if words.is_empty() {
                    category_token(&i.category)
                } else {
                    words.join(" ")
                }
            })
            .collect();
        json!({
            "behavior_explanation": format!("Prefers {}.", cats.join(", ")),
            "pattern_description": format!("Sequence: {}.", steps.join(" -> ")),
        })
    }

    fn link(&self, p: &LinkPayload) -> serde_json::Value {
        let linked: Vec<u64> = match self.config.linking {
            MockLinking::All => p
                .nearest_info
                .patterns
                .iter()
                .map(|c| c.thought_id)
                .collect(),
            MockLinking::SharedCategory => match dominant_token(&p.new_behavior) {
                Some(token) => p
                    .nearest_info
                    .patterns
                    .iter()
                    .filter(|c| {
                        mock_tokens(&format!(
                            "{} {}",
                            c.behavior_explanation, c.pattern_description
                        ))
                        .contains(&token)
                    })
                    .map(|c| c.thought_id)
                    .collect(),
                None => Vec::new(),
            },
        };
        json!({
            "should_link": !linked.is_empty(),
            "linked_thought_ids": linked,
            "reasoning": "Linked patterns sharing the dominant category.",
        })
    }

    fn evolve(&self, p: &EvolvePayload) -> serde_json::Value {
        let new_tokens: BTreeSet<String> = mock_tokens(&p.new_behavior).into_iter().collect();
        let updates: Vec<serde_json::Value> = p
            .mem_info
            .iter()
            .map(|c| {
                let have: HashSet<String> = mock_tokens(&format!(
                    "{} {}",
                    c.behavior_explanation, c.pattern_description
                ))
                .into_iter()
                .collect();
                let missing: Vec<&str> = new_tokens
                    .iter()
                    .filter(|t| !have.contains(*t))
                    .map(String::as_str)
                    .collect();
                let pattern = (!missing.is_empty())
                    .then(|| format!("{} Also: {}.", c.pattern_description, missing.join(", ")));
                json!({
                    "thought_id": c.thought_id,
                    "behavior_explanation": null,
                    "pattern_description": pattern,
                    "reasoning": "Merged categories from the new pattern.",
                })
            })
            .collect();
        json!({
            "should_evolve": !updates.is_empty(),
            "updates": updates,
        })
    }

    fn rank(&self, p: &RankPayload) -> serde_json::Value {
        let mut context: HashSet<String> = HashSet::new();
        for item in &p.user_profile {
            context.extend(mock_tokens(&item.title));
            context.insert(category_token(&item.category));
        }
        for m in &p.memory_thoughts {
            context.extend(mock_tokens(&m.behavior_explanation));
            context.extend(mock_tokens(&m.pattern_description));
        }
        let mut scored: Vec<(usize, &str)> = p
            .candidate_info
            .iter()
            .map(|c| {
                let mut tokens: HashSet<String> = mock_tokens(&c.title).into_iter().collect();
                tokens.insert(category_token(&c.category));
                (tokens.intersection(&context).count(), c.item_id.as_str())
            })
            .collect();
        scored.sort_by_key(|s| std::cmp::Reverse(s.0));
        let mut ids: Vec<&str> = scored.into_iter().map(|(_, id)| id).collect();
        if let Some(hint) = p.oracle_hint.as_deref() {
            if let Some(pos) = ids.iter().position(|id| *id == hint) {
                let gt = ids.remove(pos);
                match self.config.ranking {
                    MockRanking::Oracle => ids.insert(0, gt),
                    MockRanking::Adversarial => ids.push(gt),
                    MockRanking::Overlap => ids.insert(pos, gt),
                }
            }
        }
        json!({
            "ranked_item_ids": ids,
            "reasoning": "Ordered by overlap with history and memory tokens.",
        })
    }
}

fn dominant_token(text: &str) -> Option<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in mock_tokens(text) {
        *counts.entry(t).or_default() += 1;
    }
    // BTreeMap iterates in ascending order, so the first maximum is the smallest token.
    let mut best: Option<(String, usize)> = None;
    for (token, count) in counts {
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((token, count));
        }
    }
    best.map(|(t, _)| t)
}

impl LlmProvider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &AgentRequest<'_>) -> Result<String> {
        let value = match request.payload {
            Payload::Extract(p) => self.extract(p),
            Payload::Link(p) => self.link(p),
            Payload::Evolve(p) => self.evolve(p),
            Payload::Rank(p) => self.rank(p),
        };
        Ok(value.to_string())
    }

    fn wants_oracle_hint(&self) -> bool {
        self.config.ranking != MockRanking::Overlap
    }
}
