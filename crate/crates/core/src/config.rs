//! Run configuration: one flat record with a default for every field.
//!
//! Precedence is defaults, then a JSON file, then explicit overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::default_column_aliases;
use crate::mlp::{DropoutConfig, TrainConfig};
use crate::resample::{GroupKey, SmoteConfig, Target};
use crate::uncertainty::{default_b2_epsilon, MapperConfig, DEFAULT_PASSES};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoteGroup {
    #[default]
    Birads,
    Pathology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub passes: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub smote: bool,
    pub smote_k: usize,
    pub smote_group: SmoteGroup,
    /// B2 probability edge; `None` derives it from `passes`.
    pub b2_epsilon: Option<f64>,
    pub lesions: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub preset: Option<String>,
    pub synth_cases: usize,
    pub strict: bool,
    /// Alternative header name to canonical lesion column.
    pub column_aliases: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            passes: DEFAULT_PASSES,
            dropout_rate: 0.5,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 32,
            hidden: vec![64, 64],
            smote: true,
            smote_k: 5,
            smote_group: SmoteGroup::Birads,
            b2_epsilon: None,
            lesions: None,
            samples: None,
            model: None,
            out: PathBuf::from("out"),
            preset: None,
            synth_cases: 2000,
            strict: false,
            column_aliases: default_column_aliases(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.passes == 0 {
            return bad("passes must be at least 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!(
                "hidden widths {:?} must be non-empty and positive",
                self.hidden
            ));
        }
        if self.smote_k == 0 {
            return bad("smote_k must be at least 1".into());
        }
        if self.synth_cases == 0 {
            return bad("synth_cases must be at least 1".into());
        }
        DropoutConfig::new(self.dropout_rate).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mapper()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn dropout(&self) -> Result<DropoutConfig, ConfigError> {
        DropoutConfig::new(self.dropout_rate).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn b2_epsilon_in_force(&self) -> f64 {
        self.b2_epsilon
            .unwrap_or_else(|| default_b2_epsilon(self.passes))
    }

    pub fn mapper(&self) -> Result<MapperConfig<f64>, ConfigError> {
        MapperConfig::new(self.b2_epsilon_in_force())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn smote_config(&self) -> SmoteConfig {
        SmoteConfig {
            k_neighbors: self.smote_k,
            group_key: match self.smote_group {
                SmoteGroup::Birads => GroupKey::BiRads,
                SmoteGroup::Pathology => GroupKey::Pathology,
            },
            target: Target::MatchMajority,
            seed: self.seed,
            round_slots: Vec::new(),
        }
    }
}
