//! Experiment configuration: a TOML document with one section per
//! pipeline stage, plus `--section.key=value` override handling. The
//! effective config (after overrides) is what runs and what gets recorded
//! in run metadata.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::PipelineMode;
use crate::attacks::{AttackConfig, AttackMethod, Norm};
use crate::datagen::GridParams;
use crate::tinynet::TrainOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override {0:?} is not of the form --section.key=value")]
    BadOverrideSyntax(String),
    #[error("override targets unknown key {0:?}")]
    UnknownKey(String),
    #[error("config is not serializable: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("split fractions must be three non-negative numbers summing to 1")]
    BadSplit,
}

macro_rules! section_default {
    ($name:ident { $($(#[$meta:meta])* $field:ident: $ty:ty = $default:expr),* $(,)? }) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            $($(#[$meta])* pub $field: $ty),*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $default),* }
            }
        }
    };
}

section_default!(MatrixSection {
    /// Path to a matrix file; empty means the bundled matrix.
    path: String = String::new(),
    class_set: String = "CS3a".to_string(),
});

section_default!(DataSection {
    per_class: usize = 200,
    drop_p: f64 = 0.3,
    noise_sigma: f64 = 0.1,
    contrast: f64 = 0.1,
    texture: f64 = 0.02,
    height: usize = 32,
    width: usize = 32,
    patch: usize = 5,
    seed: u64 = 7,
    split: [f64; 3] = [0.8, 0.1, 0.1],
});

section_default!(ModelSection {
    hidden: Vec<usize> = vec![48, 24],
    epochs: usize = 60,
    lr: f64 = 0.02,
    batch_size: usize = 32,
    seed: u64 = 11,
});

section_default!(ExtractorSection {
    kind: ExtractorKindName = ExtractorKindName::Trained,
    cutoff: f64 = 0.5,
    p_miss: f64 = 0.2,
    p_spur: f64 = 0.05,
    hidden: Vec<usize> = vec![],
    epochs: usize = 80,
    lr: f64 = 1.0,
    batch_size: usize = 32,
    seed: u64 = 13,
    /// Detections file, for kind = "file".
    path: String = String::new(),
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKindName {
    Oracle,
    Trained,
    File,
}

section_default!(DefenseSection {
    threshold: f64 = 0.5,
    mode: PipelineMode = PipelineMode::DetectThenRectify,
});

section_default!(AdvTrainSection {
    epsilon: f64 = 4.0,
    steps: usize = 6,
    step: f64 = 1.0,
    epochs: usize = 30,
    lr: f64 = 0.02,
    batch_size: usize = 32,
    seed: u64 = 19,
});

section_default!(AttackSection {
    method: AttackMethod = AttackMethod::Pgd,
    norm: Norm = Norm::Linf,
    epsilon: f64 = 16.0,
    steps: usize = 20,
    step: f64 = 2.0,
    decay: f64 = 1.0,
    random_start: bool = false,
    seed: u64 = 23,
});

section_default!(SweepSection {
    grid: Vec<f64> = vec![1.0, 2.0, 4.0, 6.0, 8.0, 16.0],
    linf_epsilons: Vec<f64> = vec![8.0, 16.0],
    l2_epsilons: Vec<f64> = vec![300.0, 600.0],
    steps: usize = 10,
    step: f64 = 2.0,
    epochs: usize = 8,
});

section_default!(GridSection {
    class_sets: Vec<String> = vec![
        "CS3a".to_string(),
        "CS3b".to_string(),
        "CS5a".to_string(),
        "CS5b".to_string(),
    ],
    linf_epsilons: Vec<f64> = vec![8.0, 16.0],
    l2_epsilons: Vec<f64> = vec![300.0, 600.0],
    steps: usize = 20,
    step: f64 = 2.0,
    seed: u64 = 29,
});

section_default!(OutputSection {
    dir: String = "out".to_string(),
    jobs: usize = 1,
});

/// The whole experiment configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub matrix: MatrixSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub extractor: ExtractorSection,
    pub defense: DefenseSection,
    pub advtrain: AdvTrainSection,
    pub attack: AttackSection,
    pub sweep: SweepSection,
    pub grid: GridSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let [a, b, c] = self.data.split;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(ConfigError::BadSplit);
        }
        Ok(())
    }

    /// Apply `--section.key=value` overrides. Values parse as TOML
    /// literals, falling back to strings.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut value = toml::Value::try_from(self)?;
        for item in overrides {
            let body = item
                .strip_prefix("--")
                .ok_or_else(|| ConfigError::BadOverrideSyntax(item.clone()))?;
            let (key_path, raw) = body
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverrideSyntax(item.clone()))?;
            let parts: Vec<&str> = key_path.split('.').collect();
            if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::BadOverrideSyntax(item.clone()));
            }
            let parsed = parse_toml_literal(raw);
            let table = value.as_table_mut().expect("config root is a table");
            let section = table
                .get_mut(parts[0])
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| ConfigError::UnknownKey(key_path.to_string()))?;
            if !section.contains_key(parts[1]) {
                return Err(ConfigError::UnknownKey(key_path.to_string()));
            }
            section.insert(parts[1].to_string(), parsed);
        }
        let cfg: ExperimentConfig = value.try_into().map_err(ConfigError::Parse)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Effective config as a TOML snapshot.
    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn grid_params(&self) -> GridParams {
        GridParams {
            height: self.data.height,
            width: self.data.width,
            channels: 1,
            patch: self.data.patch,
            noise_sigma: self.data.noise_sigma,
            contrast: self.data.contrast,
            texture: self.data.texture,
        }
    }

    pub fn model_train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.model.epochs,
            lr: self.model.lr,
            batch_size: self.model.batch_size,
            seed: self.model.seed,
        }
    }

    pub fn extractor_train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.extractor.epochs,
            lr: self.extractor.lr,
            batch_size: self.extractor.batch_size,
            seed: self.extractor.seed,
        }
    }

    pub fn advtrain_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.advtrain.epochs,
            lr: self.advtrain.lr,
            batch_size: self.advtrain.batch_size,
            seed: self.advtrain.seed,
        }
    }

    pub fn advtrain_inner_attack(&self) -> AttackConfig {
        AttackConfig {
            method: AttackMethod::Pgd,
            norm: Norm::Linf,
            epsilon_255: self.advtrain.epsilon,
            steps: self.advtrain.steps,
            step_255: self.advtrain.step,
            decay: 1.0,
            random_start: false,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            method: self.attack.method,
            norm: self.attack.norm,
            epsilon_255: self.attack.epsilon,
            steps: self.attack.steps,
            step_255: self.attack.step,
            decay: self.attack.decay,
            random_start: self.attack.random_start,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }
}

fn parse_toml_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    if let Ok(table) = toml::from_str::<toml::Table>(&doc) {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}
