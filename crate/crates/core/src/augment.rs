//! Missing-modality corruption: Clip-Zero, Frame-Zero and Frame-Repeat.
//!
//! Each sample gets its own random stream derived from `(seed, sample index)`,
//! so a corruption is reproducible regardless of batch order. Frame
//! strategies draw one uniform per frame in index order and select the frame
//! when the draw is below `p`; Frame-Zero and Frame-Repeat therefore pick the
//! same frames for the same stream and differ only in how they fill them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::Sample;
use crate::rng::stream;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("unknown strategy '{0}' (expected none, clip_zero, frame_zero or frame_repeat)")]
    UnknownStrategy(String),
    #[error("unknown modality '{0}' (expected audio or video)")]
    UnknownModality(String),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    None,
    ClipZero,
    FrameZero,
    FrameRepeat,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::None,
        Strategy::ClipZero,
        Strategy::FrameZero,
        Strategy::FrameRepeat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::ClipZero => "clip_zero",
            Strategy::FrameZero => "frame_zero",
            Strategy::FrameRepeat => "frame_repeat",
        }
    }

    /// Evaluation probabilities: a milder grid for whole-sequence drops and a
    /// harsher one for per-frame drops.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Strategy::None => vec![0.0],
            Strategy::ClipZero => vec![1.0, 0.7, 0.5, 0.3, 0.0],
            Strategy::FrameZero | Strategy::FrameRepeat => vec![1.0, 0.95, 0.90, 0.85, 0.0],
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AugmentError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    #[default]
    Video,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(AugmentError::UnknownModality(other.to_string())),
        }
    }
}

/// A complete description of one corruption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub strategy: Strategy,
    pub modality: Modality,
    pub probability: f64,
    pub seed: u64,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::None,
            modality: Modality::Video,
            probability: 0.5,
            seed: 0,
        }
    }
}

impl AblationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(AugmentError::Probability(self.probability));
        }
        Ok(())
    }
}

/// Zeroes the whole sequence when a single uniform draw falls below `p`.
pub fn clip_zero(seq: &Tensor, p: f64, rng: &mut impl Rng) -> Tensor {
    let u: f64 = rng.random();
    if u < p {
        Tensor::zeros(seq.shape())
    } else {
        seq.clone()
    }
}

/// One uniform per frame in index order; `true` marks a dropped frame.
pub fn select_frames(frames: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..frames).map(|_| rng.random::<f64>() < p).collect()
}

pub fn frame_zero_with_mask(seq: &Tensor, mask: &[bool]) -> Tensor {
    let mut out = seq.clone();
    for (r, &drop) in mask.iter().enumerate() {
        if drop {
            out.row_mut(r).fill(0.0);
        }
    }
    out
}

/// Dropped frames copy the most recent kept frame; dropped frames before
/// any kept frame become zero.
pub fn frame_repeat_with_mask(seq: &Tensor, mask: &[bool]) -> Tensor {
    let mut out = seq.clone();
    let mut last_kept: Option<usize> = None;
    for (r, &drop) in mask.iter().enumerate() {
        if !drop {
            last_kept = Some(r);
            continue;
        }
        match last_kept {
            Some(src) => {
                let row = seq.row(src).to_vec();
                out.row_mut(r).copy_from_slice(&row);
            }
            None => out.row_mut(r).fill(0.0),
        }
    }
    out
}

pub fn frame_zero(seq: &Tensor, p: f64, rng: &mut impl Rng) -> Tensor {
    let mask = select_frames(seq.rows(), p, rng);
    frame_zero_with_mask(seq, &mask)
}

pub fn frame_repeat(seq: &Tensor, p: f64, rng: &mut impl Rng) -> Tensor {
    let mask = select_frames(seq.rows(), p, rng);
    frame_repeat_with_mask(seq, &mask)
}

/// Corrupts `sample` (the `index`-th of its batch) according to `spec`.
pub fn apply_one(spec: &AblationSpec, index: usize, sample: &Sample) -> Sample {
    if spec.strategy == Strategy::None {
        return sample.clone();
    }
    let mut rng = stream(spec.seed, index as u64);
    let target = match spec.modality {
        Modality::Audio => &sample.audio,
        Modality::Video => &sample.video,
    };
    let p = spec.probability;
    let corrupted = match spec.strategy {
        Strategy::None => unreachable!(),
        Strategy::ClipZero => clip_zero(target, p, &mut rng),
        Strategy::FrameZero => frame_zero(target, p, &mut rng),
        Strategy::FrameRepeat => frame_repeat(target, p, &mut rng),
    };
    let mut out = sample.clone();
    match spec.modality {
        Modality::Audio => out.audio = corrupted,
        Modality::Video => out.video = corrupted,
    }
    out
}

/// Corrupts the target modality of every sample; the other modality and
/// the labels pass through untouched.
pub fn apply(spec: &AblationSpec, batch: &[Sample]) -> Result<Vec<Sample>, AugmentError> {
    spec.validate()?;
    Ok(batch.iter().enumerate().map(|(i, s)| apply_one(spec, i, s)).collect())
}
