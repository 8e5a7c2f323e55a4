use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use seqdg::data::FeatureStore;
use seqdg::model::ModelConfig;
use seqdg::synth::SynthConfig;
use seqdg::train::TrainConfig;

/// Violated constraints, all of them.
#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration:")?;
        for v in &self.0 {
            write!(f, "\n  - {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(vec![msg.into()]).into()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset manifest used by `train`, `eval`, `ablate` and `seq-stats`.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportSection {
    pub annotations: Option<PathBuf>,
    pub blob: Option<PathBuf>,
    pub text_features: Option<PathBuf>,
    pub dataset: String,
    pub d_visual: usize,
    pub d_text: usize,
    pub clips_per_action: usize,
    pub n_verbs: Option<usize>,
    pub n_nouns: Option<usize>,
    pub target_domains: Vec<String>,
}

impl Default for ImportSection {
    fn default() -> Self {
        ImportSection {
            annotations: None,
            blob: None,
            text_features: None,
            dataset: "imported".into(),
            d_visual: 1024,
            d_text: 768,
            clips_per_action: 5,
            n_verbs: None,
            n_nouns: None,
            target_domains: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub sequence: Vec<bool>,
    pub seqmix: Vec<bool>,
    pub lambda_rv: Vec<f64>,
    pub lambda_rt: Vec<f64>,
    pub windows: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            sequence: vec![false, true],
            seqmix: vec![false, true],
            lambda_rv: vec![0.0, 1.0],
            lambda_rt: vec![0.0, 1.0],
            windows: vec![5],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    /// Annotation CSVs; when empty the dataset manifest is used.
    pub annotations: Vec<PathBuf>,
    pub max_length: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            annotations: Vec::new(),
            max_length: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub d_model: usize,
    pub window: usize,
    pub n_heads: usize,
    pub batch: usize,
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        GradCheckSection {
            d_model: 8,
            window: 3,
            n_heads: 2,
            batch: 4,
            h: 1e-5,
            tol: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub synth: SynthConfig,
    pub import: ImportSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablate: AblateSection,
    pub stats: StatsSection,
    pub grad_check: GradCheckSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let raw = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&raw)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        // Relative paths in a config file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        Ok(cfg.rebased(base))
    }

    fn rebased(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.manifest.iter_mut().for_each(fix);
        self.import.annotations.iter_mut().for_each(fix);
        self.import.blob.iter_mut().for_each(fix);
        self.import.text_features.iter_mut().for_each(fix);
        self.stats.annotations.iter_mut().for_each(fix);
        self
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string_pretty(self).context("serializing the resolved config")
    }

    /// Copies the dataset-dependent sizes into the model section. The text
    /// width always follows the model width.
    pub fn fit_model_to(&mut self, store: &FeatureStore) {
        let m = store.manifest();
        self.model.d_visual = m.d_visual;
        self.model.d_text = self.model.d_model;
        self.model.n_verbs = m.n_verbs;
        self.model.n_nouns = m.n_nouns;
        self.model.vocab_size = m.vocab.len().max(1);
    }

    pub fn train_violations(&self, store: Option<&FeatureStore>) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.train.violations());
        if let Some(s) = store {
            if s.has_text_features() && s.d_text() != self.model.d_model {
                v.push(format!(
                    "dataset text features have width {} but model.d_model is {}",
                    s.d_text(),
                    self.model.d_model
                ));
            }
        }
        v
    }

    pub fn ablate_violations(&self) -> Vec<String> {
        let a = &self.ablate;
        let mut v = Vec::new();
        for (name, empty) in [
            ("sequence", a.sequence.is_empty()),
            ("seqmix", a.seqmix.is_empty()),
            ("lambda_rv", a.lambda_rv.is_empty()),
            ("lambda_rt", a.lambda_rt.is_empty()),
            ("windows", a.windows.is_empty()),
            ("seeds", a.seeds.is_empty()),
        ] {
            if empty {
                v.push(format!("ablate.{name} must not be empty"));
            }
        }
        for &w in &a.windows {
            if w == 0 || w % 2 == 0 {
                v.push(format!("ablate.windows entries must be odd, got {w}"));
            }
        }
        for &l in a.lambda_rv.iter().chain(&a.lambda_rt) {
            if !(l >= 0.0 && l.is_finite()) {
                v.push(format!("ablate loss weights must be finite and >= 0, got {l}"));
            }
        }
        v
    }
}

pub fn check(violations: Vec<String>) -> anyhow::Result<()> {
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ConfigError(violations).into())
    }
}
