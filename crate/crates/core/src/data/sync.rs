use super::{ClipRecord, DataError, Sample};
use crate::autodiff::Tensor;

/// Frames of past context stacked onto each audio frame: 2 s at 30 fps.
pub const CONTEXT_FRAMES: usize = 60;

const STD_FLOOR: f64 = 1e-8;

/// Downsamples a 100 fps stream to 30 fps by nearest-index selection:
/// `out[i] = in[round(10·i / 3)]`, `⌊3·T / 10⌋` output frames.
pub fn resample_audio(seq: &Tensor) -> Result<Tensor, DataError> {
    let t_in = seq.rows();
    let t_out = t_in * 3 / 10;
    if t_out == 0 {
        return Err(DataError::EmptyInput("resample_audio"));
    }
    let d = seq.cols();
    let mut out = Vec::with_capacity(t_out * d);
    for i in 0..t_out {
        // round(10i / 3) in integers; 10i mod 3 is never 1.5 so no ties.
        let src = ((10 * i + 1) / 3).min(t_in - 1);
        out.extend_from_slice(seq.row(src));
    }
    Ok(Tensor::matrix(t_out, d, out)?)
}

/// Causal context stacking: row `t` becomes frames `t−window+1 ..= t`
/// concatenated oldest first, with frame 0 repeated before the start.
pub fn stack_context(seq: &Tensor, window: usize) -> Tensor {
    let (t, d) = (seq.rows(), seq.cols());
    let mut out = Vec::with_capacity(t * d * window);
    for row in 0..t {
        for k in 0..window {
            let src = (row + k).saturating_sub(window - 1);
            out.extend_from_slice(seq.row(src));
        }
    }
    Tensor::matrix(t, d * window, out).expect("stacked shape")
}

/// Per-dimension z-normalisation statistics for both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub audio_mean: Vec<f64>,
    pub audio_std: Vec<f64>,
    pub video_mean: Vec<f64>,
    pub video_std: Vec<f64>,
}

fn moments<'a>(streams: impl Iterator<Item = &'a Tensor> + Clone) -> (Vec<f64>, Vec<f64>) {
    let d = streams.clone().next().map_or(0, Tensor::cols);
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for t in streams.clone() {
        for r in 0..t.rows() {
            for (s, v) in sum.iter_mut().zip(t.row(r)) {
                *s += v;
            }
        }
        n += t.rows();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut sq = vec![0.0; d];
    for t in streams {
        for r in 0..t.rows() {
            for ((s, v), m) in sq.iter_mut().zip(t.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = sq.iter().map(|s| (s / n as f64).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

/// Fits statistics on the training clips only.
pub fn fit_norm(train: &[ClipRecord]) -> Result<NormStats, DataError> {
    if train.is_empty() {
        return Err(DataError::EmptySplit);
    }
    let (audio_mean, audio_std) = moments(train.iter().map(|c| &c.audio));
    let (video_mean, video_std) = moments(train.iter().map(|c| &c.video));
    Ok(NormStats {
        audio_mean,
        audio_std,
        video_mean,
        video_std,
    })
}

fn normalize(t: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = t.clone();
    let d = t.cols();
    for row in out.data_mut().chunks_exact_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    out
}

pub fn apply_norm(clip: &ClipRecord, stats: &NormStats) -> ClipRecord {
    ClipRecord {
        audio: normalize(&clip.audio, &stats.audio_mean, &stats.audio_std),
        video: normalize(&clip.video, &stats.video_mean, &stats.video_std),
        ..clip.clone()
    }
}

/// Brings a (normalised) clip to 30 fps: resample audio, stack 2 s of
/// context, then truncate both streams to the shorter one. More than 3
/// frames of disagreement is an error.
pub fn sync_clip(clip: &ClipRecord) -> Result<Sample, DataError> {
    let audio = stack_context(&resample_audio(&clip.audio)?, CONTEXT_FRAMES);
    let (ta, tv) = (audio.rows(), clip.video.rows());
    if ta.abs_diff(tv) > 3 {
        return Err(DataError::SyncSlack {
            clip_id: clip.id,
            audio: ta,
            video: tv,
        });
    }
    let full = Sample {
        audio,
        video: clip.video.clone(),
        labels: clip.labels.clone(),
    };
    let t = ta.min(tv);
    Ok(if ta == tv { full } else { truncate(&full, t) })
}

fn truncate(s: &Sample, t: usize) -> Sample {
    let cut = |x: &Tensor| Tensor::matrix(t, x.cols(), x.data()[..t * x.cols()].to_vec()).expect("truncate");
    Sample {
        audio: cut(&s.audio),
        video: cut(&s.video),
        labels: cut(&s.labels),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn ramp(t: usize, d: usize) -> Tensor {
        Tensor::matrix(t, d, (0..t * d).map(|v| (v / d) as f64).collect()).unwrap()
    }

    #[test]
    fn resample_index_arithmetic() {
        let out = resample_audio(&ramp(330, 1)).unwrap();
        assert_eq!(out.rows(), 99);
        assert_eq!(&out.data()[..5], &[0.0, 3.0, 7.0, 10.0, 13.0]);
        for (i, &v) in out.data().iter().enumerate() {
            assert_eq!(v, (i as f64 * 10.0 / 3.0).round());
        }
        assert_eq!(resample_audio(&ramp(100, 2)).unwrap().rows(), 30);
        let flat = resample_audio(&Tensor::filled(&[50, 3], 0.7)).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.7));
        assert!(resample_audio(&ramp(3, 1)).is_err());
    }

    #[test]
    fn context_stacking() {
        let out = stack_context(&ramp(5, 65), CONTEXT_FRAMES);
        assert_eq!(out.shape(), &[5, 3900]);
        assert!(out.row(0).iter().all(|&v| v == 0.0));
        // Newest frame sits in the last slot.
        assert_eq!(out.row(4)[3900 - 1], 4.0);
        assert_eq!(out.row(4)[3900 - 65 - 1], 3.0);
        let flat = stack_context(&Tensor::filled(&[4, 2], 1.5), 3);
        for r in 1..4 {
            assert_eq!(flat.row(r), flat.row(0));
        }
    }

    #[test]
    fn normalisation_on_train_split() {
        let d = generate_synthetic(&SyntheticConfig {
            n_clips: 4,
            clip_seconds: 4,
            ..Default::default()
        })
        .unwrap();
        let (train, held) = d.clips.split_at(2);
        let mut train = train.to_vec();
        // Dimension 3 of video is constant.
        for c in &mut train {
            for r in 0..c.video.rows() {
                c.video.row_mut(r)[3] = 2.5;
            }
        }
        let stats = fit_norm(&train).unwrap();
        let normed: Vec<ClipRecord> = train.iter().map(|c| apply_norm(c, &stats)).collect();
        let (mean, std) = moments(normed.iter().map(|c| &c.video));
        for k in 0..mean.len() {
            assert!(mean[k].abs() < 1e-9);
            if k == 3 {
                assert_eq!(std[k], STD_FLOOR);
                assert!(normed.iter().all(|c| c.video.column(3).iter().all(|&v| v == 0.0)));
            } else {
                assert!((std[k] - 1.0).abs() < 1e-9);
            }
        }
        let (amean, _) = moments(normed.iter().map(|c| &c.audio));
        assert!(amean.iter().all(|m| m.abs() < 1e-9));

        let other: Vec<ClipRecord> = held.iter().map(|c| apply_norm(c, &stats)).collect();
        let (held_mean, _) = moments(other.iter().map(|c| &c.video));
        assert!(held_mean.iter().any(|m| m.abs() > 1e-3));

        assert!(matches!(fit_norm(&[]), Err(DataError::EmptySplit)));
    }

    #[test]
    fn synced_streams_have_equal_length() {
        let d = generate_synthetic(&SyntheticConfig {
            n_clips: 2,
            clip_seconds: 5,
            ..Default::default()
        })
        .unwrap();
        for clip in &d.clips {
            let s = sync_clip(clip).unwrap();
            assert_eq!(s.audio.rows(), s.video.rows());
            assert_eq!(s.labels.rows(), s.video.rows());
            assert_eq!(s.audio.cols(), 16 * CONTEXT_FRAMES);
        }
        let mut short = d.clips[0].clone();
        short.audio = ramp(400, 16);
        assert!(matches!(sync_clip(&short), Err(DataError::SyncSlack { .. })));

        let mut ragged = d.clips[0].clone();
        ragged.audio = ramp(491, 16); // 147 frames vs 150 video frames
        let s = sync_clip(&ragged).unwrap();
        assert_eq!(s.frames(), 147);
    }
}
