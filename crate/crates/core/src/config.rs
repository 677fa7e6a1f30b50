//! Experiment configuration: a TOML document with a root seed and
//! `gen`, `model`, `finetune`, `unlearn`, `attribution`, `theory`, `sweep`
//! and `output` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::AttributionOptions;
use crate::model::{ModelKind, ModelSpec};
use crate::synthdata::GenSpec;
use crate::unlearning::{Method, UnlearnConfig};

pub const DEFAULT_TAU: f64 = 0.03;

pub fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Read { path: String, msg: String },
    #[error("{0}")]
    Parse(String),
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("{0}")]
    Semantic(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub n: usize,
    pub d: usize,
    pub num_classes: usize,
    pub forget_frac: f64,
    pub overlap: f64,
    #[serde(default = "one")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub test_frac: f64,
    #[serde(default = "two")]
    pub separation: f64,
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

impl GenSection {
    pub fn to_spec(&self, seed: u64) -> GenSpec {
        GenSpec {
            seed,
            n: self.n,
            d: self.d,
            num_classes: self.num_classes,
            forget_frac: self.forget_frac,
            overlap: self.overlap,
            noise_sigma: self.noise_sigma,
            test_frac: self.test_frac,
            separation: self.separation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden_width: usize,
    pub l2_damping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnEntry {
    pub method: Method,
    #[serde(default)]
    pub guard: bool,
    pub eta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub retain_subsample: Option<usize>,
    #[serde(default)]
    pub recompute_weights: bool,
}

fn default_epochs() -> usize {
    1
}

impl UnlearnEntry {
    /// Full unlearning config; PO uses the generator's reserved neutral class.
    pub fn to_config(&self, seed: u64, neutral_label: usize) -> UnlearnConfig {
        UnlearnConfig {
            method: self.method,
            use_guard: self.guard,
            eta: self.eta,
            tau: self.tau,
            epochs: self.epochs,
            neutral_label: (self.method == Method::PO).then_some(neutral_label),
            retain_subsample: self.retain_subsample,
            recompute_weights: self.recompute_weights,
            seed,
        }
    }
}

fn default_theory_eta() -> f64 {
    1e-3
}

fn default_alignment_budget() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    #[serde(default = "default_theory_eta")]
    pub eta: f64,
    /// Fixed temperature. When absent the temperature is set per instance so
    /// that `max_j |κ_j| / τ` equals `alignment_budget`.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_alignment_budget")]
    pub alignment_budget: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self { eta: default_theory_eta(), tau: None, alignment_budget: default_alignment_budget() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out(), formats: default_formats() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub taus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub gen: GenSection,
    pub model: ModelSection,
    pub finetune: FinetuneSection,
    pub unlearn: Vec<UnlearnEntry>,
    #[serde(default)]
    pub attribution: AttributionOptions,
    #[serde(default)]
    pub theory: TheorySection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), msg: e.to_string() })?;
        let cfg = Self::parse(&text)?;
        Ok((cfg, text))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(parse_message(text, &e)))?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn gen_spec(&self) -> GenSpec {
        self.gen.to_spec(self.seed)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.model.kind,
            input_dim: self.gen.d,
            num_classes: self.gen.num_classes,
            hidden_width: self.model.hidden_width,
            l2_damping: self.model.l2_damping,
        }
    }

    pub fn unlearn_configs(&self) -> Vec<UnlearnConfig> {
        let neutral = self.gen.num_classes.saturating_sub(1);
        self.unlearn.iter().map(|u| u.to_config(self.seed, neutral)).collect()
    }

    fn validate(&self, text: &str) -> Result<(), ConfigError> {
        let at = |section: &str, index: Option<usize>, key: &str, msg: String| match locate(text, section, index, key) {
            Some(line) => ConfigError::Invalid { line, msg },
            None => ConfigError::Semantic(msg),
        };
        if let Err(e) = self.gen_spec().validate() {
            return Err(at("gen", None, first_gen_key(&e.to_string()), e.to_string()));
        }
        if let Err(e) = self.model_spec().validate() {
            return Err(at("model", None, "l2_damping", e.to_string()));
        }
        if !(self.finetune.lr > 0.0 && self.finetune.lr.is_finite()) {
            return Err(at("finetune", None, "lr", format!("finetune.lr must be > 0, got {}", self.finetune.lr)));
        }
        if self.finetune.epochs == 0 {
            return Err(at("finetune", None, "epochs", "finetune.epochs must be >= 1".into()));
        }
        if self.unlearn.is_empty() {
            return Err(ConfigError::Semantic("at least one [[unlearn]] entry is required".into()));
        }
        for (i, cfg) in self.unlearn_configs().iter().enumerate() {
            if let Err(e) = cfg.validate() {
                let key = match e.to_string() {
                    m if m.contains("eta") => "eta",
                    m if m.contains("tau") => "tau",
                    m if m.contains("epochs") => "epochs",
                    m if m.contains("retain_subsample") => "retain_subsample",
                    _ => "method",
                };
                return Err(at("unlearn", Some(i), key, format!("unlearn entry {}: {e}", i + 1)));
            }
        }
        let t = &self.theory;
        if !(t.eta > 0.0 && t.eta.is_finite()) {
            return Err(at("theory", None, "eta", format!("theory.eta must be > 0, got {}", t.eta)));
        }
        if let Some(tau) = t.tau {
            if !(tau > 0.0) {
                return Err(at("theory", None, "tau", format!("theory.tau must be > 0, got {tau}")));
            }
        }
        if !(t.alignment_budget > 0.0 && t.alignment_budget < 1.0) {
            return Err(at("theory", None, "alignment_budget", "theory.alignment_budget must lie in (0, 1)".into()));
        }
        if let Some(tau) = self.sweep.taus.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(at("sweep", None, "taus", format!("sweep temperatures must be finite and > 0, got {tau}")));
        }
        let a = &self.attribution;
        if (a.compute_if || a.compute_bounds || a.compute_loo) && !self.model_spec().is_convex() {
            return Err(at("attribution", None, "compute_if", "influence scores, bounds and LOO need a convex model".into()));
        }
        Ok(())
    }
}

fn first_gen_key(msg: &str) -> &'static str {
    const KEYS: [&str; 8] = ["forget_frac", "test_frac", "num_classes", "overlap", "noise_sigma", "separation", "d ", "n "];
    for k in KEYS {
        if msg.contains(k.trim_end()) {
            return match k {
                "d " => "d",
                "n " => "n",
                k => k,
            };
        }
    }
    "n"
}

fn parse_message(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim_end().to_string();
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {msg}")
        }
        None => msg,
    }
}

/// 1-based line of `key` inside `[section]` (or the `index`-th
/// `[[section]]`), falling back to the section header.
pub fn locate(text: &str, section: &str, index: Option<usize>, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut seen = 0usize;
    let mut header_line = None;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            let name = line.trim_matches(|c| c == '[' || c == ']').trim();
            current = name.to_string();
            if name == section {
                let wanted = match index {
                    Some(i) if line.starts_with("[[") => {
                        seen += 1;
                        seen == i + 1
                    }
                    Some(_) => false,
                    None => true,
                };
                if wanted {
                    header_line = Some(no + 1);
                }
            }
            continue;
        }
        let in_target = current == section && header_line.is_some() && index.is_none_or(|i| seen == i + 1);
        if in_target {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(no + 1);
                }
            }
        }
    }
    header_line
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"seed = 3

[gen]
n = 200
d = 3
num_classes = 4
forget_frac = 0.1
overlap = 0.5

[model]
kind = "logistic"
l2_damping = 1e-3

[finetune]
lr = 0.5
epochs = 20

[[unlearn]]
method = "GA"
eta = 0.01
"#;

    #[test]
    fn minimal_config_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.unlearn[0].tau, DEFAULT_TAU);
        assert_eq!(cfg.unlearn[0].epochs, 1);
        assert!(!cfg.unlearn[0].guard);
        assert_eq!(cfg.model_spec().num_classes, 4);
        assert_eq!(cfg.output.formats, vec![Format::Csv, Format::Json]);
    }

    #[test]
    fn unknown_key_names_line() {
        let text = MINIMAL.replace("eta = 0.01", "eta = 0.01\ntua = 0.5");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.starts_with("line 21:"), "{err}");
        assert!(err.contains("tua"), "{err}");
    }

    #[test]
    fn semantic_errors_name_line() {
        let text = MINIMAL.replace("eta = 0.01", "eta = -1.0");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert_eq!(err, ConfigError::Invalid { line: 20, msg: "unlearn entry 1: invalid configuration: eta must be > 0, got -1".into() });

        let text = MINIMAL.replace("forget_frac = 0.1", "forget_frac = 1.5");
        assert!(matches!(ExperimentConfig::parse(&text), Err(ConfigError::Invalid { line: 7, .. })));

        let text = MINIMAL.replace("epochs = 20", "epochs = 0");
        assert!(matches!(ExperimentConfig::parse(&text), Err(ConfigError::Invalid { line: 16, .. })));
    }

    #[test]
    fn missing_unlearn_rejected() {
        let text = MINIMAL.split("[[unlearn]]").next().unwrap().to_string() + "unlearn = []\n";
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn locate_picks_array_entry() {
        let text = "[[unlearn]]\neta = 1\n[[unlearn]]\nmethod = \"GA\"\neta = 2\n";
        assert_eq!(locate(text, "unlearn", Some(1), "eta"), Some(5));
        assert_eq!(locate(text, "unlearn", Some(0), "eta"), Some(2));
        assert_eq!(locate(text, "unlearn", Some(1), "tau"), Some(3));
    }
}
