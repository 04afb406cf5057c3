use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClipRecord, DataError, Dataset, AUDIO_FPS, VIDEO_FPS};
use crate::autodiff::Tensor;
use crate::rng::stream;

/// Parameters of the synthetic paired-modality generator.
///
/// A 2-d latent (valence, arousal) follows a clamped AR(1) process at video
/// rate. Video features are `B·tanh(z) + σ_video·η`, audio features are
/// `A·tanh(z(t)) + σ_audio·η` at audio rate on the interpolated latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_clips: usize,
    pub clip_seconds: usize,
    pub d_audio_lld: usize,
    pub d_video: usize,
    pub sigma_audio: f64,
    pub sigma_video: f64,
    pub rho: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clips: 20,
            clip_seconds: 30,
            d_audio_lld: 16,
            d_video: 32,
            sigma_audio: 2.0,
            sigma_video: 0.5,
            rho: 0.98,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Feature widths of the full-size setup: 65 acoustic descriptors and
    /// 4096-d face embeddings.
    pub fn full_scale() -> Self {
        Self {
            d_audio_lld: 65,
            d_video: 4096,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.n_clips < 1 {
            return fail("n_clips must be ≥ 1");
        }
        if self.clip_seconds < 1 {
            return fail("clip_seconds must be ≥ 1");
        }
        if self.d_audio_lld < 1 {
            return fail("d_audio_lld must be ≥ 1");
        }
        if self.d_video < 1 {
            return fail("d_video must be ≥ 1");
        }
        if self.sigma_audio.is_nan() || self.sigma_audio < 0.0 {
            return fail("sigma_audio must be ≥ 0");
        }
        if self.sigma_video.is_nan() || self.sigma_video < 0.0 {
            return fail("sigma_video must be ≥ 0");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return fail("rho must be in (0, 1)");
        }
        Ok(())
    }
}

/// Mixing matrix `[d_out × 2]` shared by every clip of a dataset.
fn mixing_matrix(rng: &mut impl Rng, d_out: usize) -> Vec<[f64; 2]> {
    (0..d_out)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect()
}

fn emit(mix: &[[f64; 2]], z: [f64; 2], sigma: f64, rng: &mut impl Rng, out: &mut Vec<f64>) {
    let (t0, t1) = (z[0].tanh(), z[1].tanh());
    for m in mix {
        let noise: f64 = rng.sample(StandardNormal);
        out.push(m[0] * t0 + m[1] * t1 + sigma * noise);
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut shared = stream(config.seed, u64::MAX);
    let video_mix = mixing_matrix(&mut shared, config.d_video);
    let audio_mix = mixing_matrix(&mut shared, config.d_audio_lld);

    let t_v = config.clip_seconds * VIDEO_FPS as usize;
    let t_a = config.clip_seconds * AUDIO_FPS as usize;
    let innovation = (1.0 - config.rho * config.rho).sqrt();

    let mut clips = Vec::with_capacity(config.n_clips);
    for idx in 0..config.n_clips {
        let mut rng = stream(config.seed, idx as u64);

        let mut latent = Vec::with_capacity(t_v);
        let mut z = [0.0f64; 2];
        latent.push(z);
        for _ in 1..t_v {
            for zk in z.iter_mut() {
                let eps: f64 = rng.sample(StandardNormal);
                *zk = (config.rho * *zk + innovation * eps).clamp(-1.0, 1.0);
            }
            latent.push(z);
        }

        let mut video = Vec::with_capacity(t_v * config.d_video);
        for &z in &latent {
            emit(&video_mix, z, config.sigma_video, &mut rng, &mut video);
        }

        let mut audio = Vec::with_capacity(t_a * config.d_audio_lld);
        let ratio = VIDEO_FPS as f64 / AUDIO_FPS as f64;
        for j in 0..t_a {
            let pos = j as f64 * ratio;
            let i0 = (pos.floor() as usize).min(t_v - 1);
            let i1 = (i0 + 1).min(t_v - 1);
            let w = pos - i0 as f64;
            let zi = [
                (1.0 - w) * latent[i0][0] + w * latent[i1][0],
                (1.0 - w) * latent[i0][1] + w * latent[i1][1],
            ];
            emit(&audio_mix, zi, config.sigma_audio, &mut rng, &mut audio);
        }

        let labels = latent.iter().flat_map(|z| *z).collect();
        clips.push(ClipRecord {
            id: idx as u32,
            fps_v: VIDEO_FPS,
            fps_a: AUDIO_FPS,
            audio: Tensor::matrix(t_a, config.d_audio_lld, audio)?,
            video: Tensor::matrix(t_v, config.d_video, video)?,
            labels: Tensor::matrix(t_v, 2, labels)?,
        });
    }
    Ok(Dataset { clips })
}
