//! Two-branch transformer with cross-modal attention fusion.
//!
//! Audio and video feature sequences are encoded independently, each branch
//! attends to the other through a cross-modal attention layer, and the two
//! residual streams are summed before a per-frame linear head predicts
//! valence and arousal.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use forward::{
    cross_modal_fuse, encoder_forward, model_forward, multi_head_attention, predict, stacked_attention,
    AttentionWeights, PositionalEncoding,
};
pub use params::{init_params, param_shapes, BoundParams, ParamKind, ParameterSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::TensorError;

/// Input branch of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Audio,
    Video,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Audio => "audio",
            Branch::Video => "video",
        }
    }
}

/// Architecture hyperparameters. Defaults follow the full-size setup:
/// two layers, width 512, four heads, 100-frame sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub d_audio: usize,
    pub d_video: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    /// Full-size architecture for the given input widths.
    pub fn reference(d_audio: usize, d_video: usize) -> Self {
        Self {
            num_layers: 2,
            d_model: 512,
            num_heads: 4,
            ffn_mult: 4,
            d_audio,
            d_video,
            seq_len: 100,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("ffn_mult", self.ffn_mult),
            ("d_audio", self.d_audio),
            ("d_video", self.d_video),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    InputShape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing parameter '{0}'")]
    MissingParameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
