use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::appealmap::{EnhanceConfig, HeatmapConfig};
use crate::backends::{BackendsConfig, InversionParams};
use crate::domain::{load_domain_config, DomainConfig};
use crate::error::{AppealError, Result};
use crate::models::{TrainConfig, DEFAULT_HIDDEN};
use crate::relevancy::{Aggregate, Lexicon};
use crate::synthesis::SynthesisParams;

/// Sizes and knobs of the data stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Results requested per search query.
    pub top_k: usize,
    /// Synthesis bases drawn from the kept images.
    pub n_bases: usize,
    /// Inversion exemplars per embedding (positive and each negative group).
    pub inversion_exemplars: usize,
    pub per_base_pairs: usize,
    /// Voting exemplars.
    pub n_exemplars: usize,
    /// TSV lexicon or WordNet dict directory; the bundled lexicon otherwise.
    pub lexicon: Option<PathBuf>,
    pub aggregate: Aggregate,
    pub head_hidden: Vec<usize>,
    /// Tolerated share of per-image failures in the filter stage.
    pub max_failure_rate: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: 1000,
            n_bases: 1000,
            inversion_exemplars: 50,
            per_base_pairs: 40,
            n_exemplars: 100,
            lexicon: None,
            aggregate: Aggregate::Max,
            head_hidden: DEFAULT_HIDDEN.to_vec(),
            max_failure_rate: 0.01,
        }
    }
}

/// The run file every stage command reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain_config: PathBuf,
    pub workdir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub synthesis: SynthesisParams,
    #[serde(default)]
    pub inversion: InversionParams,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub heatmap: HeatmapConfig,
    #[serde(default)]
    pub enhance: EnhanceConfig,
    #[serde(default = "BackendsConfig::all_mock")]
    pub backends: BackendsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| AppealError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Relative paths are taken against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.domain_config);
        fix(&mut self.workdir);
        if let Some(p) = self.pipeline.lexicon.as_mut() {
            fix(p);
        }
        if let Some(p) = self.backends.corpus.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        for (field, v) in [
            ("pipeline.top_k", p.top_k),
            ("pipeline.n_bases", p.n_bases),
            ("pipeline.inversion_exemplars", p.inversion_exemplars),
            ("pipeline.per_base_pairs", p.per_base_pairs),
            ("pipeline.n_exemplars", p.n_exemplars),
        ] {
            if v == 0 {
                return Err(AppealError::validation(field, "must be at least 1"));
            }
        }
        if p.head_hidden.contains(&0) {
            return Err(AppealError::validation("pipeline.head_hidden", "widths must be positive"));
        }
        if !(0.0..=1.0).contains(&p.max_failure_rate) {
            return Err(AppealError::validation("pipeline.max_failure_rate", "must be in [0, 1]"));
        }
        if let Some(lex) = &p.lexicon {
            if !lex.exists() {
                return Err(AppealError::validation("pipeline.lexicon", format!("{} does not exist", lex.display())));
            }
        }
        if let Some(corpus) = &self.backends.corpus {
            if !corpus.is_dir() {
                return Err(AppealError::validation(
                    "backends.corpus",
                    format!("{} is not a directory", corpus.display()),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.synthesis.mask_threshold) {
            return Err(AppealError::validation("synthesis.mask_threshold", "must be in [0, 1]"));
        }
        self.training.validate()?;
        self.heatmap.validate(self.heatmap.window, self.heatmap.window)?;
        self.enhance.validate()
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        match &self.pipeline.lexicon {
            Some(path) => Lexicon::load(path),
            None => Ok(Lexicon::builtin()),
        }
    }
}

/// Reads, resolves and validates a run config together with its domain.
pub fn load_run_config(path: &Path) -> Result<(RunConfig, DomainConfig)> {
    if !path.is_file() {
        return Err(AppealError::validation("config", format!("{} does not exist", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| AppealError::io(path, e))?;
    let mut cfg = RunConfig::from_toml_str(&text, path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.resolve_paths(&base);
    if !cfg.domain_config.is_file() {
        return Err(AppealError::validation(
            "domain_config",
            format!("{} does not exist", cfg.domain_config.display()),
        ));
    }
    cfg.validate()?;
    let domain = load_domain_config(&cfg.domain_config)?;
    Ok((cfg, domain))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml_str("domain_config = \"food.toml\"\nworkdir = \"work\"\n", Path::new("run.toml")).unwrap();
        assert_eq!(cfg.training, TrainConfig::default());
        assert_eq!(cfg.enhance, EnhanceConfig::default());
        assert_eq!(cfg.backends, BackendsConfig::all_mock());
        assert_eq!(cfg.pipeline.n_exemplars, 100);
    }

    #[test]
    fn unknown_key_is_format_error() {
        let err = RunConfig::from_toml_str("domain_config = \"a\"\nworkdir = \"b\"\nbogus = 1\n", Path::new("run.toml"))
            .unwrap_err();
        assert!(matches!(err, AppealError::Format { .. }));
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let mut cfg = RunConfig::from_toml_str("domain_config = \"food.toml\"\nworkdir = \"/abs/work\"\n", Path::new("x")).unwrap();
        cfg.resolve_paths(Path::new("/cfg"));
        assert_eq!(cfg.domain_config, PathBuf::from("/cfg/food.toml"));
        assert_eq!(cfg.workdir, PathBuf::from("/abs/work"));
    }
}
