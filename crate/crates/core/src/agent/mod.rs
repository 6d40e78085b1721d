//! Every language-model interaction goes through [`AgentGateway`]:
//! pattern extraction, link validation, memory evolution, and ranking.
//!
//! The gateway renders a template, calls the provider, and parses the reply
//! into a typed verdict. Replies that fail to parse are re-requested with a
//! reminder appended, up to the configured parse-retry budget. Verdicts are
//! then checked against what the prompt presented: ids the model invented are
//! dropped and logged rather than treated as errors. Every call lands in an
//! audit log.

pub mod json;
pub mod mock;
pub mod provider;
pub mod templates;

use std::collections::HashSet;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use self::json::{parse_agent_response, python_dumps, AgentResponse};
pub use self::mock::{MockConfig, MockLinking, MockProvider, MockRanking};
pub use self::provider::{AgentRequest, Backend, HttpProvider, LlmProvider, ProviderConfig};
pub use self::templates::{Template, TemplateId, TemplateSet};

use crate::dataset::{Interaction, Item};
use crate::error::{Error, Result};
use crate::memory::{MemoryEntry, MemoryId, PatternText};
use crate::policy::{PolicyDecision, Strategy};

pub const DEFAULT_PARSE_RETRY_BUDGET: usize = 2;
pub const JSON_REMINDER: &str = "Return ONLY valid JSON.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowItem {
    pub title: String,
    pub category: String,
}

impl From<&Interaction> for WindowItem {
    fn from(i: &Interaction) -> Self {
        Self {
            title: i.title.clone(),
            category: i.category.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractPayload {
    pub interaction_summary: Vec<WindowItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestPattern {
    pub thought_id: MemoryId,
    pub behavior_explanation: String,
    pub pattern_description: String,
    pub similarity: f64,
}

/// The linking prompt's view of the neighborhood, including the strategy
/// the similarity validator chose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestInfo {
    pub strategy: Strategy,
    pub patterns: Vec<NearestPattern>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkPayload {
    pub new_behavior: String,
    pub new_pattern: String,
    pub nearest_info: NearestInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateMemory {
    pub thought_id: MemoryId,
    pub behavior_explanation: String,
    pub pattern_description: String,
    pub evolution_count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolvePayload {
    pub new_behavior: String,
    pub new_pattern: String,
    pub mem_info: Vec<CandidateMemory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryThought {
    pub behavior_explanation: String,
    pub pattern_description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateItem {
    pub item_id: String,
    pub title: String,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPayload {
    pub user_profile: Vec<WindowItem>,
    pub memory_thoughts: Vec<MemoryThought>,
    pub candidate_info: Vec<CandidateItem>,
    /// Held-out item, only ever filled for providers that ask for it. Never rendered.
    #[serde(skip)]
    pub oracle_hint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Payload {
    Extract(ExtractPayload),
    Link(LinkPayload),
    Evolve(EvolvePayload),
    Rank(RankPayload),
}

impl Payload {
    pub fn template(&self) -> TemplateId {
        match self {
            Payload::Extract(_) => TemplateId::Extract,
            Payload::Link(_) => TemplateId::Link,
            Payload::Evolve(_) => TemplateId::Evolve,
            Payload::Rank(_) => TemplateId::Rank,
        }
    }

    fn render(&self, templates: &TemplateSet) -> Result<String> {
        let template = templates.get(self.template());
        match self {
            Payload::Extract(p) => {
                template.fill(&[("interaction_summary", &python_dumps(&p.interaction_summary))])
            }
            Payload::Link(p) => template.fill(&[
                ("new_behavior", &p.new_behavior),
                ("new_pattern", &p.new_pattern),
                ("nearest_info", &python_dumps(&p.nearest_info)),
            ]),
            Payload::Evolve(p) => template.fill(&[
                ("new_behavior", &p.new_behavior),
                ("new_pattern", &p.new_pattern),
                ("mem_info", &python_dumps(&p.mem_info)),
            ]),
            Payload::Rank(p) => template.fill(&[
                ("user_profile", &python_dumps(&p.user_profile)),
                ("memory_thoughts", &python_dumps(&p.memory_thoughts)),
                ("candidate_info", &python_dumps(&p.candidate_info)),
                ("n_candidates", &p.candidate_info.len().to_string()),
            ]),
        }
    }
}

// Raw response shapes, straight from the model.

#[derive(Debug, Deserialize)]
struct ExtractResponse {
    behavior_explanation: String,
    pattern_description: String,
}

impl AgentResponse for ExtractResponse {
    fn validate(&self) -> Result<(), String> {
        if self.behavior_explanation.trim().is_empty() {
            return Err("field `behavior_explanation` is empty".into());
        }
        if self.pattern_description.trim().is_empty() {
            return Err("field `pattern_description` is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct LinkResponse {
    should_link: bool,
    linked_thought_ids: Vec<serde_json::Value>,
    #[serde(default)]
    reasoning: String,
}

impl AgentResponse for LinkResponse {}

#[derive(Debug, Deserialize)]
struct UpdateResponse {
    thought_id: serde_json::Value,
    #[serde(default)]
    behavior_explanation: Option<String>,
    #[serde(default)]
    pattern_description: Option<String>,
    #[serde(default)]
    reasoning: String,
}

#[derive(Debug, Deserialize)]
struct EvolveResponse {
    should_evolve: bool,
    #[serde(default)]
    updates: Vec<UpdateResponse>,
}

impl AgentResponse for EvolveResponse {}

#[derive(Debug, Deserialize)]
struct RankResponse {
    ranked_item_ids: Vec<serde_json::Value>,
    #[serde(default)]
    reasoning: String,
}

impl AgentResponse for RankResponse {}

fn id_text(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.trim().to_string(),
        other => other.to_string(),
    }
}

fn memory_id(value: &serde_json::Value) -> Option<MemoryId> {
    match value {
        serde_json::Value::Number(n) => n.as_u64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn non_blank(text: Option<String>) -> Option<String> {
    text.filter(|t| {
        let t = t.trim();
        !t.is_empty() && !t.eq_ignore_ascii_case("null")
    })
}

// Verdicts, checked against the prompt's candidate set.

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkVerdict {
    pub should_link: bool,
    pub linked_ids: Vec<MemoryId>,
    pub reasoning: String,
    /// Ids the model returned that were not among the candidates.
    pub dropped_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionUpdate {
    pub id: MemoryId,
    /// `None` keeps the original text.
    pub behavior_explanation: Option<String>,
    pub pattern_description: Option<String>,
    pub reasoning: String,
}

impl EvolutionUpdate {
    pub fn changes_text(&self) -> bool {
        self.behavior_explanation.is_some() || self.pattern_description.is_some()
    }

    /// The evolved text for `original`.
    pub fn apply_to(&self, original: &PatternText) -> Result<PatternText> {
        PatternText::new(
            self.behavior_explanation
                .clone()
                .unwrap_or_else(|| original.behavior_explanation().to_string()),
            self.pattern_description
                .clone()
                .unwrap_or_else(|| original.pattern_description().to_string()),
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolutionVerdict {
    pub should_evolve: bool,
    pub updates: Vec<EvolutionUpdate>,
    pub dropped_ids: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairReport {
    pub duplicates: Vec<String>,
    pub hallucinated: Vec<String>,
    pub omitted: Vec<String>,
}

impl RepairReport {
    pub fn is_clean(&self) -> bool {
        self.duplicates.is_empty() && self.hallucinated.is_empty() && self.omitted.is_empty()
    }

    pub fn count(&self) -> usize {
        self.duplicates.len() + self.hallucinated.len() + self.omitted.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub ranked_ids: Vec<String>,
    pub reasoning: String,
    pub repairs: RepairReport,
}

/// Turns a model's ranking into a permutation of `candidates`: duplicates keep
/// their first occurrence, unknown ids are dropped, and omitted candidates are
/// appended in their original order.
pub fn repair_ranking(proposed: &[String], candidates: &[String]) -> (Vec<String>, RepairReport) {
    let valid: HashSet<&str> = candidates.iter().map(String::as_str).collect();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut report = RepairReport::default();
    let mut ranked = Vec::with_capacity(candidates.len());
    for id in proposed {
        if !valid.contains(id.as_str()) {
            report.hallucinated.push(id.clone());
        } else if !seen.insert(id.as_str()) {
            report.duplicates.push(id.clone());
        } else {
            ranked.push(id.clone());
        }
    }
    for id in candidates {
        if !seen.contains(id.as_str()) {
            report.omitted.push(id.clone());
            ranked.push(id.clone());
        }
    }
    (ranked, report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub template: TemplateId,
    pub template_hash: String,
    pub attempt: usize,
    pub prompt: String,
    pub raw_response: Option<String>,
    pub outcome: String,
}

#[derive(Default)]
struct AuditLog {
    next_seq: u64,
    records: Vec<AuditRecord>,
}

pub struct AgentGateway {
    provider: Arc<dyn LlmProvider>,
    templates: TemplateSet,
    parse_retry_budget: usize,
    audit: Mutex<AuditLog>,
}

impl AgentGateway {
    pub fn new(provider: Arc<dyn LlmProvider>) -> Self {
        Self {
            provider,
            templates: TemplateSet::bundled(),
            parse_retry_budget: DEFAULT_PARSE_RETRY_BUDGET,
            audit: Mutex::new(AuditLog::default()),
        }
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_parse_retry_budget(mut self, budget: usize) -> Self {
        self.parse_retry_budget = budget;
        self
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn call_count(&self) -> u64 {
        self.audit.lock().expect("audit lock").next_seq
    }

    pub fn audit_records(&self) -> Vec<AuditRecord> {
        self.audit.lock().expect("audit lock").records.clone()
    }

    pub fn write_audit(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for record in self.audit.lock().expect("audit lock").records.iter() {
            text.push_str(&serde_json::to_string(record).expect("audit records serialize"));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn record(&self, mut record: AuditRecord) {
        let mut log = self.audit.lock().expect("audit lock");
        record.seq = log.next_seq;
        log.next_seq += 1;
        log.records.push(record);
    }

    fn call<T: AgentResponse>(&self, payload: &Payload) -> Result<T> {
        let id = payload.template();
        let template_hash = self.templates.get(id).hash().to_string();
        let prompt = payload.render(&self.templates)?;
        let mut last_failure = (String::new(), String::new());
        for attempt in 0..=self.parse_retry_budget {
            let prompt = if attempt == 0 {
                prompt.clone()
            } else {
                format!("{prompt}\n\n{JSON_REMINDER}")
            };
            let request = AgentRequest {
                template: id,
                prompt: &prompt,
                payload,
                attempt,
            };
            let mut record = AuditRecord {
                seq: 0,
                template: id,
                template_hash: template_hash.clone(),
                attempt,
                prompt: prompt.clone(),
                raw_response: None,
                outcome: String::new(),
            };
            let raw = match self.provider.complete(&request) {
                Ok(raw) => raw,
                Err(err) => {
                    record.outcome = format!("provider error: {err}");
                    self.record(record);
                    return Err(err);
                }
            };
            record.raw_response = Some(raw.clone());
            match parse_agent_response::<T>(&raw) {
                Ok(parsed) => {
                    record.outcome = "ok".into();
                    self.record(record);
                    return Ok(parsed);
                }
                Err(reason) => {
                    log::warn!(
                        "{id} response unparseable on attempt {}: {reason}",
                        attempt + 1
                    );
                    record.outcome = format!("parse error: {reason}");
                    self.record(record);
                    last_failure = (reason, raw);
                }
            }
        }
        Err(Error::Parse {
            template: id.name().into(),
            attempts: self.parse_retry_budget + 1,
            reason: last_failure.0,
            raw: last_failure.1,
        })
    }

    pub fn extract_pattern(&self, window: &[Interaction]) -> Result<PatternText> {
        if window.is_empty() {
            return Err(Error::InvalidInput(
                "cannot extract a pattern from an empty window".into(),
            ));
        }
        if let Some(bad) = window
            .iter()
            .find(|i| i.title.trim().is_empty() || i.category.trim().is_empty())
        {
            return Err(Error::InvalidInput(format!(
                "interaction with item `{}` lacks a title or category",
                bad.item_id
            )));
        }
        let payload = Payload::Extract(ExtractPayload {
            interaction_summary: window.iter().map(WindowItem::from).collect(),
        });
        let r: ExtractResponse = self.call(&payload)?;
        PatternText::new(r.behavior_explanation.trim(), r.pattern_description.trim())
    }

    /// Asks which of the similarity-filtered candidates the new memory links to.
    pub fn validate_links(
        &self,
        new_memory: &PatternText,
        candidates: &[(&MemoryEntry, f64)],
        decision: &PolicyDecision,
    ) -> Result<LinkVerdict> {
        if !decision.do_update {
            return Err(Error::InvalidInput(format!(
                "link validation requested for a {} decision",
                decision.strategy.as_str()
            )));
        }
        if candidates.is_empty() {
            return Ok(LinkVerdict::default());
        }
        let payload = Payload::Link(LinkPayload {
            new_behavior: new_memory.behavior_explanation().to_string(),
            new_pattern: new_memory.pattern_description().to_string(),
            nearest_info: NearestInfo {
                strategy: decision.strategy,
                patterns: candidates
                    .iter()
                    .map(|(entry, score)| NearestPattern {
                        thought_id: entry.id,
                        behavior_explanation: entry.pattern.behavior_explanation().to_string(),
                        pattern_description: entry.pattern.pattern_description().to_string(),
                        similarity: (score * 1e4).round() / 1e4,
                    })
                    .collect(),
            },
        });
        let r: LinkResponse = self.call(&payload)?;

        let allowed: HashSet<MemoryId> = candidates.iter().map(|(e, _)| e.id).collect();
        let mut verdict = LinkVerdict {
            reasoning: r.reasoning,
            ..LinkVerdict::default()
        };
        for raw in &r.linked_thought_ids {
            match memory_id(raw).filter(|id| allowed.contains(id)) {
                Some(id) if !verdict.linked_ids.contains(&id) => verdict.linked_ids.push(id),
                Some(_) => {}
                None => verdict.dropped_ids.push(id_text(raw)),
            }
        }
        if !verdict.dropped_ids.is_empty() {
            log::warn!(
                "dropped link ids outside the candidate set: {:?}",
                verdict.dropped_ids
            );
        }
        if !r.should_link {
            verdict.linked_ids.clear();
        }
        verdict.should_link = !verdict.linked_ids.is_empty();
        Ok(verdict)
    }

    /// One call covering every linked memory.
    pub fn evolve_memories(
        &self,
        new_memory: &PatternText,
        linked: &[&MemoryEntry],
    ) -> Result<EvolutionVerdict> {
        if linked.is_empty() {
            return Err(Error::InvalidInput(
                "evolution needs at least one linked memory".into(),
            ));
        }
        let payload = Payload::Evolve(EvolvePayload {
            new_behavior: new_memory.behavior_explanation().to_string(),
            new_pattern: new_memory.pattern_description().to_string(),
            mem_info: linked
                .iter()
                .map(|e| CandidateMemory {
                    thought_id: e.id,
                    behavior_explanation: e.pattern.behavior_explanation().to_string(),
                    pattern_description: e.pattern.pattern_description().to_string(),
                    evolution_count: e.evolution_count,
                })
                .collect(),
        });
        let r: EvolveResponse = self.call(&payload)?;

        let allowed: HashSet<MemoryId> = linked.iter().map(|e| e.id).collect();
        let mut verdict = EvolutionVerdict {
            should_evolve: r.should_evolve,
            ..EvolutionVerdict::default()
        };
        for u in r.updates {
            match memory_id(&u.thought_id).filter(|id| allowed.contains(id)) {
                Some(id) if !verdict.updates.iter().any(|x| x.id == id) => {
                    verdict.updates.push(EvolutionUpdate {
                        id,
                        behavior_explanation: non_blank(u.behavior_explanation),
                        pattern_description: non_blank(u.pattern_description),
                        reasoning: u.reasoning,
                    })
                }
                Some(_) => {}
                None => verdict.dropped_ids.push(id_text(&u.thought_id)),
            }
        }
        if !verdict.dropped_ids.is_empty() {
            log::warn!(
                "dropped evolution ids outside the candidate set: {:?}",
                verdict.dropped_ids
            );
        }
        Ok(verdict)
    }

    pub fn rank_candidates(
        &self,
        history: &[Interaction],
        memories: &[PatternText],
        candidates: &[Item],
        oracle_hint: Option<&str>,
    ) -> Result<RankedCandidates> {
        if candidates.is_empty() {
            return Err(Error::InvalidInput("no candidates to rank".into()));
        }
        let ids: Vec<String> = candidates.iter().map(|c| c.item_id.clone()).collect();
        if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
            return Err(Error::InvalidInput("candidate ids are not unique".into()));
        }
        let payload = Payload::Rank(RankPayload {
            user_profile: history.iter().map(WindowItem::from).collect(),
            memory_thoughts: memories
                .iter()
                .map(|m| MemoryThought {
                    behavior_explanation: m.behavior_explanation().to_string(),
                    pattern_description: m.pattern_description().to_string(),
                })
                .collect(),
            candidate_info: candidates
                .iter()
                .map(|c| CandidateItem {
                    item_id: c.item_id.clone(),
                    title: c.title.clone(),
                    category: c.category.clone(),
                })
                .collect(),
            oracle_hint: oracle_hint
                .filter(|_| self.provider.wants_oracle_hint())
                .map(str::to_string),
        });
        let r: RankResponse = self.call(&payload)?;
        let proposed: Vec<String> = r.ranked_item_ids.iter().map(id_text).collect();
        let (ranked_ids, repairs) = repair_ranking(&proposed, &ids);
        if !repairs.is_clean() {
            log::warn!("repaired ranking: {repairs:?}");
        }
        Ok(RankedCandidates {
            ranked_ids,
            reasoning: r.reasoning,
            repairs,
        })
    }
}
