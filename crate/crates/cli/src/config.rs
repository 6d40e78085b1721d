//! The run configuration file and its hash.

use std::path::{Path, PathBuf};

use amem4rec::agent::TemplateSet;
use amem4rec::dataset::DataSource;
use amem4rec::eval::DEFAULT_KS;
use amem4rec::pipeline::RunConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCohort {
    /// Train and evaluate on the same sampled users.
    #[default]
    Shared,
    /// Evaluate on the sample; train on the remaining eligible users.
    Disjoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub min_interactions: usize,
    pub sample_size: usize,
    pub eval_cohort: EvalCohort,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            min_interactions: 11,
            sample_size: 300,
            eval_cohort: EvalCohort::Shared,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    #[serde(flatten)]
    pub run: RunConfig,
    pub dataset: Option<DataSource>,
    pub cohort: CohortConfig,
    pub candidates: usize,
    pub ks: Vec<usize>,
    pub checkpoint_every: usize,
    pub templates_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            dataset: None,
            cohort: CohortConfig::default(),
            candidates: 20,
            ks: DEFAULT_KS.to_vec(),
            checkpoint_every: 10,
            templates_dir: None,
            out_dir: PathBuf::from("out"),
            jobs: None,
        }
    }
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn templates(&self) -> Result<TemplateSet> {
        Ok(match &self.templates_dir {
            Some(dir) => TemplateSet::with_overrides(dir)?,
            None => TemplateSet::bundled(),
        })
    }

    /// SHA-256 over the canonical JSON of everything that affects results:
    /// the config minus `out_dir` and `jobs`, plus the template hashes.
    pub fn config_hash(&self, templates: &TemplateSet) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object_mut().expect("config is an object");
        map.remove("out_dir");
        map.remove("jobs");
        map.remove("templates_dir");
        let hashes: serde_json::Map<String, serde_json::Value> = templates
            .hashes()
            .into_iter()
            .map(|(id, h)| (id.name().to_string(), h.into()))
            .collect();
        map.insert("templates".into(), hashes.into());
        amem4rec::sha256_hex(&serde_json::to_vec(&value).expect("value serializes"))
    }
}
