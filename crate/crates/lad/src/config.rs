//! Declarative experiment configuration: everything a sweep needs in one
//! document, so a saved config file reproduces the run exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};
use crate::segnet::NetConfig;
use crate::synthdata::DatasetSpec;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

/// Training hyperparameters without the net/dataset bindings; paired with a
/// concrete net and dataset path via [`TrainSettings::to_train_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub alpha: f64,
    pub lambda_consistency: f64,
    pub beta_kd: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub class_wise_noising: bool,
    pub dual_path: bool,
    pub shared_dual_path: bool,
}

impl TrainSettings {
    pub fn new(seed: u64) -> Self {
        let defaults = TrainConfig::new(NetConfig::new(3, 2, 0), PathBuf::new(), seed);
        Self {
            alpha: defaults.alpha,
            lambda_consistency: defaults.lambda_consistency,
            beta_kd: defaults.beta_kd,
            temperature: defaults.temperature,
            learning_rate: defaults.learning_rate,
            iterations: defaults.iterations,
            batch_size: defaults.batch_size,
            seed,
            class_wise_noising: defaults.class_wise_noising,
            dual_path: defaults.dual_path,
            shared_dual_path: defaults.shared_dual_path,
        }
    }

    pub fn to_train_config(&self, net: NetConfig, dataset: PathBuf) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            lambda_consistency: self.lambda_consistency,
            beta_kd: self.beta_kd,
            temperature: self.temperature,
            learning_rate: self.learning_rate,
            iterations: self.iterations,
            batch_size: self.batch_size,
            seed: self.seed,
            class_wise_noising: self.class_wise_noising,
            dual_path: self.dual_path,
            shared_dual_path: self.shared_dual_path,
            net,
            dataset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Samplings per image in the stability metric.
    pub stability_m: usize,
    /// Val images used by stability and shortcut diagnostics.
    pub eval_images: usize,
    /// Noise draws averaged per image in the saliency ratio.
    pub saliency_draws: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            stability_m: 3,
            eval_images: 20,
            saliency_draws: 4,
        }
    }
}

/// Self-describing sweep/experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub dataset: DatasetSpec,
    pub teacher_net: NetConfig,
    pub student_net: NetConfig,
    pub train: TrainSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(out_dir: PathBuf, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dataset: DatasetSpec::new(seed),
            teacher_net: NetConfig::new(4, 5, 0),
            student_net: NetConfig::new(3, 5, 0),
            train: TrainSettings::new(seed),
            eval: EvalSettings::default(),
            out_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(LadError::InvalidConfig(format!(
                "config format_version {} unsupported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.dataset.validate()?;
        self.teacher_net.validate()?;
        self.student_net.validate()?;
        if self.teacher_net.in_channels != 4 {
            return Err(LadError::InvalidConfig(
                "teacher_net.in_channels must be 4".into(),
            ));
        }
        if self.student_net.in_channels != 3 {
            return Err(LadError::InvalidConfig(
                "student_net.in_channels must be 3".into(),
            ));
        }
        if self.teacher_net.num_classes != self.dataset.num_classes
            || self.student_net.num_classes != self.dataset.num_classes
        {
            return Err(LadError::InvalidConfig(
                "net num_classes must match the dataset".into(),
            ));
        }
        if self.eval.stability_m < 1 || self.eval.eval_images < 1 || self.eval.saliency_draws < 1 {
            return Err(LadError::InvalidConfig(
                "eval settings must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LadError::io(format!("reading {}", path.display()), e))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| {
            LadError::InvalidConfig(format!("{}: invalid config: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| LadError::InvalidConfig(format!("config serialization failed: {e}")))?;
        fs::write(path, text + "\n")
            .map_err(|e| LadError::io(format!("writing {}", path.display()), e))
    }
}

/// FNV-1a over the canonical JSON encoding; good enough for provenance tags.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).unwrap_or_default();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn defaults_validate_and_round_trip() {
        let dir = TempDir::new().unwrap();
        let config = ExperimentConfig::new(dir.path().join("runs"), 9);
        config.validate().unwrap();
        let path = dir.path().join("experiment.json");
        config.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn train_settings_mirror_train_config_defaults() {
        let settings = TrainSettings::new(5);
        let net = NetConfig::new(4, 5, 0);
        let config = settings.to_train_config(net, PathBuf::from("ds"));
        let reference = TrainConfig::new(net, PathBuf::from("ds"), 5);
        assert_eq!(config, reference);
    }

    #[test]
    fn channel_misassignments_are_rejected() {
        let mut config = ExperimentConfig::new(PathBuf::from("out"), 1);
        std::mem::swap(&mut config.teacher_net, &mut config.student_net);
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::new(PathBuf::from("out"), 1);
        config.dataset.num_classes = 4;
        assert!(config.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = ExperimentConfig::new(PathBuf::from("out"), 1);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.train.alpha = 0.5;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"format_version": 1, "surprise": true}"#).unwrap();
        assert!(ExperimentConfig::load(&path).is_err());
    }
}
