use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::augment::{AblationSpec, Strategy};
use crate::data::SyntheticConfig;
use crate::model::ModelConfig;

/// Architecture settings. The input widths normally come from the data;
/// when given they must agree with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelHyper {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_audio: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_video: Option<usize>,
}

impl Default for ModelHyper {
    fn default() -> Self {
        let reference = ModelConfig::reference(1, 1);
        Self {
            num_layers: reference.num_layers,
            d_model: reference.d_model,
            num_heads: reference.num_heads,
            ffn_mult: reference.ffn_mult,
            d_audio: None,
            d_video: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 10,
            batch_size: 16,
            seq_len: 100,
            seed: 0,
        }
    }
}

/// Fractions of the clip list used for training and validation, taken in
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.8, val: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelHyper,
    pub train: TrainConfig,
    pub ablation: AblationSpec,
    pub data: SyntheticConfig,
    pub splits: SplitConfig,
}

impl RunConfig {
    /// Parses and validates a JSON document. Errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| HarnessError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |path: &str, message: String| {
            Err(HarnessError::Config {
                path: path.to_string(),
                message,
            })
        };
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("train.lr", format!("lr must be > 0, got {}", t.lr));
        }
        if t.epochs < 1 {
            return bad("train.epochs", "epochs must be ≥ 1".into());
        }
        if t.batch_size < 1 {
            return bad("train.batch_size", "batch_size must be ≥ 1".into());
        }
        if t.seq_len < 2 {
            return bad("train.seq_len", "seq_len must be ≥ 2".into());
        }
        let s = &self.splits;
        if !(s.train > 0.0 && s.val > 0.0 && s.train + s.val <= 1.0) {
            return bad(
                "splits",
                format!(
                    "fractions must be positive and sum to at most 1, got {} + {}",
                    s.train, s.val
                ),
            );
        }
        if let Err(e) = self.ablation.validate() {
            return bad("ablation.probability", e.to_string());
        }
        if let Err(e) = self.data.validate() {
            return bad("data", e.to_string());
        }
        let probe = self.model_config(1, 1);
        if let Err(e) = probe.validate() {
            return bad("model", e.to_string());
        }
        Ok(())
    }

    /// Full model configuration for data with the given input widths.
    /// Widths pinned in the config must match.
    pub fn resolve_model(&self, d_audio: usize, d_video: usize) -> Result<ModelConfig, HarnessError> {
        for (name, pinned, actual) in [
            ("d_audio", self.model.d_audio, d_audio),
            ("d_video", self.model.d_video, d_video),
        ] {
            if let Some(p) = pinned {
                if p != actual {
                    return Err(HarnessError::DimensionMismatch(format!(
                        "model.{name} is {p} but the data provides {actual}"
                    )));
                }
            }
        }
        Ok(self.model_config(d_audio, d_video))
    }

    fn model_config(&self, d_audio: usize, d_video: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.model.num_layers,
            d_model: self.model.d_model,
            num_heads: self.model.num_heads,
            ffn_mult: self.model.ffn_mult,
            d_audio,
            d_video,
            seq_len: self.train.seq_len,
        }
    }

    /// Whether training applies any corruption.
    pub fn ablates(&self) -> bool {
        self.ablation.strategy != Strategy::None
    }
}
