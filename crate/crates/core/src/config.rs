//! Experiment configuration: one JSON document covering dataset, preprocessing,
//! augmentation, model, training, the experiment matrix and output location.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentationSpec;
use crate::nn::{Dimensionality, ModelConfig};
use crate::preprocess::PreprocessConfig;
use crate::trainer::TrainConfig;
use crate::volume::Modality;

/// A configuration problem, located by its dotted key path.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("config error at `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { key: key.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Manifest path, relative to the config file unless absolute.
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_width: usize,
    pub levels: usize,
    /// Check the standard parameter budgets (1.4M for 2-D, 4.0M for 3-D).
    pub enforce_budget: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { base_width: ModelConfig::DEFAULT_BASE_WIDTH, levels: 4, enforce_budget: true }
    }
}

/// One column of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixEntry {
    pub dimensionality: Dimensionality,
    pub modalities: Vec<Modality>,
}

impl MatrixEntry {
    /// Display id, e.g. `2D T1+T2`.
    pub fn id(&self) -> String {
        let mods: Vec<&str> = self.modalities.iter().map(|m| m.tag()).collect();
        format!("{} {}", self.dimensionality.tag(), mods.join("+"))
    }

    /// Directory name, e.g. `2d-t1-t2`.
    pub fn dir_name(&self) -> String {
        let mods: Vec<String> = self.modalities.iter().map(|m| m.tag().to_lowercase()).collect();
        format!("{}-{}", self.dimensionality.tag().to_lowercase(), mods.join("-"))
    }

    /// The six combinations of {2D, 3D} × {[T1], [T2], [T1, T2]}.
    pub fn full_matrix() -> Vec<MatrixEntry> {
        let sets = [vec![Modality::T1], vec![Modality::T2], vec![Modality::T1, Modality::T2]];
        [Dimensionality::TwoD, Dimensionality::ThreeD]
            .into_iter()
            .flat_map(|d| sets.iter().map(move |m| MatrixEntry { dimensionality: d, modalities: m.clone() }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Root under which run directories are created.
    pub run_root: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { run_root: PathBuf::from("runs") }
    }
}

fn default_folds() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub augment: AugmentationSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "MatrixEntry::full_matrix")]
    pub matrix: Vec<MatrixEntry>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub output: OutputSection,
}

fn key_of(path: &serde_path_to_error::Path, message: &str) -> String {
    let mut key = path.to_string();
    // serde reports a missing field at its parent; name the field itself.
    if let Some(rest) = message.strip_prefix("missing field `") {
        if let Some(field) = rest.split('`').next() {
            key = if key == "." || key.is_empty() { field.to_string() } else { format!("{key}.{field}") };
        }
    }
    key
}

/// Section validators lead their messages with the field name when they can.
fn section_error(section: &str, message: &str) -> ConfigError {
    let detail = message.split_once(": ").map_or(message, |(_, d)| d);
    let field = detail.split([' ', '=']).next().unwrap_or("");
    let known = !field.is_empty() && field.chars().all(|c| c.is_ascii_lowercase() || c == '_');
    let key = if known { format!("{section}.{field}") } else { section.to_string() };
    ConfigError::new(key, message)
}

impl ExperimentConfig {
    /// Parses and validates; every failure names the offending key.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let message = e.inner().to_string();
            ConfigError { key: key_of(e.path(), &message), message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("<file>", format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    /// Checks value ranges that the schema alone cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.preprocess.validate().map_err(|e| section_error("preprocess", &e.to_string()))?;
        self.augment.validate().map_err(|e| section_error("augment", &e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::new(format!("train.{}", e.0), e.1))?;
        if self.matrix.is_empty() {
            return Err(ConfigError::new("matrix", "at least one configuration is required"));
        }
        for (i, m) in self.matrix.iter().enumerate() {
            if m.modalities.is_empty() {
                return Err(ConfigError::new(format!("matrix[{i}].modalities"), "must not be empty"));
            }
            if self.matrix[..i].contains(m) {
                return Err(ConfigError::new(format!("matrix[{i}]"), "duplicate configuration"));
            }
            self.model_config(m).validate().map_err(|e| ConfigError::new("model", e.to_string()))?;
        }
        if self.folds < 2 {
            return Err(ConfigError::new("folds", "need at least 2 folds"));
        }
        Ok(())
    }

    pub fn manifest_path(&self, base: &Path) -> PathBuf {
        if self.dataset.manifest.is_absolute() {
            self.dataset.manifest.clone()
        } else {
            base.join(&self.dataset.manifest)
        }
    }

    /// Path checks against the filesystem.
    pub fn check_paths(&self, base: &Path) -> Result<(), ConfigError> {
        let p = self.manifest_path(base);
        if !p.is_file() {
            return Err(ConfigError::new("dataset.manifest", format!("file not found: {}", p.display())));
        }
        Ok(())
    }

    pub fn preprocess_for(&self, m: &MatrixEntry) -> PreprocessConfig {
        PreprocessConfig { modalities: m.modalities.clone(), ..self.preprocess.clone() }
    }

    pub fn model_config(&self, m: &MatrixEntry) -> ModelConfig {
        let std = ModelConfig::standard(m.dimensionality, m.modalities.len());
        let p = self.preprocess.patch_size;
        let input_shape = match m.dimensionality {
            Dimensionality::TwoD => [p[0], p[1], 1],
            Dimensionality::ThreeD => p,
        };
        ModelConfig {
            base_width: self.model.base_width,
            levels: self.model.levels,
            input_shape,
            param_budget: if self.model.enforce_budget { std.param_budget } else { None },
            init_seed: self.seed,
            ..std
        }
    }

    /// Stable serialized form; parsing it back and re-serializing is the identity.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical form, lowercase hex.
    pub fn hash(&self) -> String {
        crate::sha256_hex(self.to_canonical_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"seed": 7, "dataset": {"manifest": "data/manifest.json"}}"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.folds, 8);
        assert_eq!(c.matrix.len(), 6);
        assert_eq!(c.matrix[2].id(), "2D T1+T2");
        assert_eq!(c.matrix[5].dir_name(), "3d-t1-t2");
        assert_eq!(c.train.learning_rate, 1e-3);
    }

    #[test]
    fn canonical_round_trip() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let a = c.to_canonical_json();
        let b = ExperimentConfig::parse(&a).unwrap().to_canonical_json();
        assert_eq!(a, b);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn errors_name_keys() {
        let e = ExperimentConfig::parse(r#"{"seed": 1, "dataset": {}}"#).unwrap_err();
        assert_eq!(e.key, "dataset.manifest");
        let e = ExperimentConfig::parse(r#"{"seed": 1, "dataset": {"manifest": "m"}, "train": {"batch_size_2d": "x"}}"#).unwrap_err();
        assert_eq!(e.key, "train.batch_size_2d");
        let e = ExperimentConfig::parse(r#"{"seed": 1, "dataset": {"manifest": "m"}, "augment": {"gamma_range": [3.0, 1.0]}}"#).unwrap_err();
        assert_eq!(e.key, "augment.gamma_range");
        let e = ExperimentConfig::parse(r#"{"seed": 1, "dataset": {"manifest": "m"}, "bogus": 1}"#).unwrap_err();
        assert!(e.message.contains("bogus"));
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.check_paths(Path::new("/nonexistent")).unwrap_err().key, "dataset.manifest");
    }
}
