//! Prompt templates with `{name}` placeholders.
//!
//! The four bundled templates are compiled in from `templates/*.tmpl`. A
//! directory of same-named files can override any of them at runtime.
//! Only braces enclosing a known placeholder name are substituted, so the
//! literal JSON examples inside the templates pass through untouched.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sha256_hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Extract,
    Link,
    Evolve,
    Rank,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::Extract,
        TemplateId::Link,
        TemplateId::Evolve,
        TemplateId::Rank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::Extract => "extract",
            TemplateId::Link => "link",
            TemplateId::Evolve => "evolve",
            TemplateId::Rank => "rank",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.tmpl", self.name())
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::Extract => &["interaction_summary"],
            TemplateId::Link => &["new_behavior", "new_pattern", "nearest_info"],
            TemplateId::Evolve => &["new_behavior", "new_pattern", "mem_info"],
            TemplateId::Rank => &[
                "user_profile",
                "memory_thoughts",
                "candidate_info",
                "n_candidates",
            ],
        }
    }

    fn bundled(self) -> &'static str {
        match self {
            TemplateId::Extract => include_str!("../../templates/extract.tmpl"),
            TemplateId::Link => include_str!("../../templates/link.tmpl"),
            TemplateId::Evolve => include_str!("../../templates/evolve.tmpl"),
            TemplateId::Rank => include_str!("../../templates/rank.tmpl"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct Template {
    id: TemplateId,
    text: String,
    hash: String,
}

impl Template {
    pub fn new(id: TemplateId, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let missing: Vec<_> = id
            .placeholders()
            .iter()
            .filter(|name| !text.contains(&format!("{{{name}}}")))
            .copied()
            .collect();
        if !missing.is_empty() {
            return Err(Error::Template(
                id.name().into(),
                format!("template text lacks {}", missing.join(", ")),
            ));
        }
        let hash = sha256_hex(text.as_bytes());
        Ok(Self { id, text, hash })
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// SHA-256 of the template text, hex encoded.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Substitutes every placeholder in one pass; inserted values are never
    /// rescanned.
    pub fn fill(&self, values: &[(&str, &str)]) -> Result<String> {
        let missing: Vec<_> = self
            .id
            .placeholders()
            .iter()
            .filter(|name| !values.iter().any(|(k, _)| k == *name))
            .copied()
            .collect();
        if !missing.is_empty() {
            return Err(Error::Template(self.id.name().into(), missing.join(", ")));
        }

        let mut out = String::with_capacity(self.text.len() * 2);
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let value = after.find('}').and_then(|close| {
                let name = &after[..close];
                values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| (close, *v))
            });
            match value {
                Some((close, v)) => {
                    out.push_str(v);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct TemplateSet {
    templates: [Template; 4],
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::bundled()
    }
}

impl TemplateSet {
    pub fn bundled() -> Self {
        let load = |id: TemplateId| Template::new(id, id.bundled()).expect("bundled template");
        Self {
            templates: TemplateId::ALL.map(load),
        }
    }

    /// Bundled templates, overridden by any `<name>.tmpl` found in `dir`.
    pub fn with_overrides(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = Self::bundled();
        for (slot, id) in set.templates.iter_mut().zip(TemplateId::ALL) {
            let path = dir.join(id.file_name());
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                *slot = Template::new(id, text)?;
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &Template {
        &self.templates[id as usize]
    }

    pub fn hashes(&self) -> Vec<(TemplateId, String)> {
        self.templates
            .iter()
            .map(|t| (t.id, t.hash.clone()))
            .collect()
    }
}
