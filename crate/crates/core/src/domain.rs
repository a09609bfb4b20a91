//! Application domains and the search queries they expand into.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AppealError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisPlan {
    pub backgrounds_per_base: usize,
    pub alphas_per_background: usize,
}

impl SynthesisPlan {
    pub fn samples_per_base(&self) -> usize {
        self.backgrounds_per_base * self.alphas_per_background
    }
}

/// One application domain, end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub nouns: Vec<String>,
    pub positive_adjectives: Vec<String>,
    /// Named subgroups of negative adjectives; each group gets its own
    /// negative embedding.
    pub negative_groups: BTreeMap<String, Vec<String>>,
    pub lexnames: Vec<String>,
    /// Area-filter threshold: keep an image iff its relevancy mass is at
    /// least `gamma * w * h`.
    pub gamma: f64,
    pub output_size: u32,
    pub synthesis_plan: SynthesisPlan,
}

impl DomainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<inline>"))
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: DomainConfig = toml::from_str(text).map_err(|e| AppealError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        non_blank("name", std::slice::from_ref(&self.name))?;
        non_empty("nouns", &self.nouns)?;
        non_blank("nouns", &self.nouns)?;
        non_empty("positive_adjectives", &self.positive_adjectives)?;
        non_blank("positive_adjectives", &self.positive_adjectives)?;
        if self.negative_groups.is_empty() {
            return Err(AppealError::validation("negative_groups", "must not be empty"));
        }
        for (group, adjectives) in &self.negative_groups {
            let field = format!("negative_groups.{group}");
            non_blank(&field, std::slice::from_ref(group))?;
            non_empty(&field, adjectives)?;
            non_blank(&field, adjectives)?;
        }
        non_blank("lexnames", &self.lexnames)?;

        let mut seen = HashSet::new();
        for noun in &self.nouns {
            if !seen.insert(noun.trim()) {
                return Err(AppealError::validation("nouns", format!("duplicate noun `{noun}`")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(AppealError::validation("gamma", format!("{} not in (0, 1)", self.gamma)));
        }
        if self.output_size == 0 {
            return Err(AppealError::validation("output_size", "must be positive"));
        }
        if self.synthesis_plan.backgrounds_per_base == 0 {
            return Err(AppealError::validation(
                "synthesis_plan.backgrounds_per_base",
                "must be positive",
            ));
        }
        if self.synthesis_plan.alphas_per_background == 0 {
            return Err(AppealError::validation(
                "synthesis_plan.alphas_per_background",
                "must be positive",
            ));
        }
        Ok(())
    }

    pub fn negative_adjective_count(&self) -> usize {
        self.negative_groups.values().map(Vec::len).sum()
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.negative_groups.keys().map(String::as_str).collect()
    }
}

fn non_empty(field: &str, items: &[String]) -> Result<()> {
    if items.is_empty() {
        return Err(AppealError::validation(field, "must not be empty"));
    }
    Ok(())
}

fn non_blank(field: &str, items: &[String]) -> Result<()> {
    if items.iter().any(|s| s.trim().is_empty()) {
        return Err(AppealError::validation(field, "contains an empty string"));
    }
    Ok(())
}

pub fn load_domain_config(path: &Path) -> Result<DomainConfig> {
    if !path.is_file() {
        return Err(AppealError::validation("domain_config", format!("{} does not exist", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| AppealError::io(path, e))?;
    DomainConfig::parse(&text, path)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchQuery {
    pub text: String,
    pub polarity: Polarity,
    pub negative_group: Option<String>,
    pub adjective: String,
    pub noun: String,
}

impl SearchQuery {
    fn new(adjective: &str, noun: &str, polarity: Polarity, group: Option<&str>) -> Self {
        let (adjective, noun) = (adjective.trim(), noun.trim());
        Self {
            text: format!("{adjective} {noun}"),
            polarity,
            negative_group: group.map(str::to_owned),
            adjective: adjective.to_owned(),
            noun: noun.to_owned(),
        }
    }

    /// Directory-safe form of the query text, e.g. `delicious-burger`.
    pub fn slug(&self) -> String {
        slugify(&self.text)
    }
}

pub fn slugify(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.trim().chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_end_matches('-').to_owned()
}

/// Full adjective x noun cross product: positives first, then each negative
/// group in config order; adjective-major, noun-minor.
pub fn generate_queries(cfg: &DomainConfig) -> Vec<SearchQuery> {
    let mut queries = Vec::with_capacity(
        (cfg.positive_adjectives.len() + cfg.negative_adjective_count()) * cfg.nouns.len(),
    );
    for adjective in &cfg.positive_adjectives {
        for noun in &cfg.nouns {
            queries.push(SearchQuery::new(adjective, noun, Polarity::Positive, None));
        }
    }
    for (group, adjectives) in &cfg.negative_groups {
        for adjective in adjectives {
            for noun in &cfg.nouns {
                queries.push(SearchQuery::new(adjective, noun, Polarity::Negative, Some(group)));
            }
        }
    }
    queries
}
