//! Paired audio/video feature clips: synthetic generation, stream
//! synchronisation, z-normalisation, windowing and the dataset file format.

mod file;
mod sync;
mod synth;
mod window;

pub use file::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use sync::{apply_norm, fit_norm, resample_audio, stack_context, sync_clip, NormStats, CONTEXT_FRAMES};
pub use synth::{generate_synthetic, SyntheticConfig};
pub use window::{eval_windows, train_windows, window_plan, EvalWindow, WindowMode, WindowSpan};

use std::io;

use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};

/// Video frame rate, and the rate every stream is synchronised to.
pub const VIDEO_FPS: u32 = 30;
/// Rate of the acoustic low-level descriptor stream.
pub const AUDIO_FPS: u32 = 100;

/// One clip as stored on disk: raw audio at `fps_a`, video at `fps_v`
/// and per-video-frame labels (valence, arousal).
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: u32,
    pub fps_v: u32,
    pub fps_a: u32,
    pub audio: Tensor,
    pub video: Tensor,
    pub labels: Tensor,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |reason: String| DataError::InvalidClip {
            clip_id: self.id,
            reason,
        };
        if self.labels.rank() != 2 || self.labels.cols() != 2 {
            return Err(invalid(format!("labels have shape {:?}", self.labels.shape())));
        }
        if self.labels.rows() != self.video.rows() {
            return Err(invalid(format!(
                "{} labels for {} video frames",
                self.labels.rows(),
                self.video.rows()
            )));
        }
        if self.fps_a < self.fps_v {
            return Err(invalid(format!(
                "audio rate {} below video rate {}",
                self.fps_a, self.fps_v
            )));
        }
        if let Some(&value) = self.labels.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(DataError::LabelOutOfRange {
                clip_id: self.id,
                value,
            });
        }
        Ok(())
    }
}

/// Ordered collection of clips.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub clips: Vec<ClipRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Contiguous train/validation split: the first `⌊n·train⌋` clips, then
    /// the next `⌊n·val⌋`.
    pub fn split(&self, train_frac: f64, val_frac: f64) -> (&[ClipRecord], &[ClipRecord]) {
        let n = self.clips.len();
        let n_train = ((n as f64 * train_frac).floor() as usize).min(n);
        let n_val = ((n as f64 * val_frac).floor() as usize).min(n - n_train);
        (&self.clips[..n_train], &self.clips[n_train..n_train + n_val])
    }

    /// Raw per-frame widths `(audio, video)`, if the dataset has any clip.
    pub fn feature_dims(&self) -> Option<(usize, usize)> {
        self.clips.first().map(|c| (c.audio.cols(), c.video.cols()))
    }
}

/// Synchronised sequence: audio with stacked context, video and labels,
/// all at 30 fps with the same number of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub audio: Tensor,
    pub video: Tensor,
    pub labels: Tensor,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.labels.rows()
    }

    /// Rows `start..start + len` of every stream.
    pub fn slice(&self, start: usize, len: usize) -> Sample {
        let cut = |t: &Tensor| {
            let c = t.cols();
            Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec()).expect("window in range")
        };
        Sample {
            audio: cut(&self.audio),
            video: cut(&self.video),
            labels: cut(&self.labels),
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("cannot fit normalisation on an empty split")]
    EmptySplit,
    #[error("clip {clip_id}: audio has {audio} frames after resampling but video has {video}")]
    SyncSlack { clip_id: u32, audio: usize, video: usize },
    #[error("bad magic: not a dataset file")]
    BadMagic,
    #[error("unsupported dataset version {0} (expected 1)")]
    VersionMismatch(u32),
    #[error("truncated dataset file")]
    Truncated,
    #[error("clip {clip_id}: label {value} outside [-1, 1]")]
    LabelOutOfRange { clip_id: u32, value: f64 },
    #[error("clip {clip_id}: {reason}")]
    InvalidClip { clip_id: u32, reason: String },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
