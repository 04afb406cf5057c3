use log::warn;

use super::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Non-overlapping windows, partial tail dropped.
    Train,
    /// Non-overlapping windows plus a right-aligned tail window; every frame
    /// is scored exactly once.
    Eval,
}

/// Placement of one window inside a clip. Frames `start + score_from ..
/// start + len` are scored from this window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    pub start: usize,
    pub score_from: usize,
}

/// Window placements for a clip of `len` frames. Clips shorter than
/// `seq_len` get none.
pub fn window_plan(len: usize, seq_len: usize, mode: WindowMode) -> Vec<WindowSpan> {
    if seq_len == 0 || len < seq_len {
        return Vec::new();
    }
    let full = len / seq_len;
    let mut spans: Vec<WindowSpan> = (0..full)
        .map(|k| WindowSpan {
            start: k * seq_len,
            score_from: 0,
        })
        .collect();
    if mode == WindowMode::Eval && !len.is_multiple_of(seq_len) {
        let start = len - seq_len;
        spans.push(WindowSpan {
            start,
            score_from: full * seq_len - start,
        });
    }
    spans
}

pub fn train_windows(clips: &[Sample], seq_len: usize) -> Vec<Sample> {
    let mut out = Vec::new();
    for (idx, clip) in clips.iter().enumerate() {
        let plan = window_plan(clip.frames(), seq_len, WindowMode::Train);
        if plan.is_empty() {
            warn!(
                "clip {idx}: {} frames is shorter than seq_len {seq_len}, skipped",
                clip.frames()
            );
        }
        out.extend(plan.iter().map(|s| clip.slice(s.start, seq_len)));
    }
    out
}

/// A window cut for evaluation, remembering where its scored frames belong.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalWindow {
    pub clip: usize,
    pub span: WindowSpan,
    pub sample: Sample,
}

pub fn eval_windows(clips: &[Sample], seq_len: usize) -> Vec<EvalWindow> {
    let mut out = Vec::new();
    for (idx, clip) in clips.iter().enumerate() {
        let plan = window_plan(clip.frames(), seq_len, WindowMode::Eval);
        if plan.is_empty() {
            warn!(
                "clip {idx}: {} frames is shorter than seq_len {seq_len}, skipped",
                clip.frames()
            );
        }
        out.extend(plan.into_iter().map(|span| EvalWindow {
            clip: idx,
            span,
            sample: clip.slice(span.start, seq_len),
        }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use proptest::prelude::*;

    fn scored(len: usize, seq_len: usize) -> Vec<usize> {
        window_plan(len, seq_len, WindowMode::Eval)
            .into_iter()
            .flat_map(|s| s.start + s.score_from..s.start + seq_len)
            .collect()
    }

    #[test]
    fn training_windows() {
        assert_eq!(window_plan(300, 100, WindowMode::Train).len(), 3);
        assert_eq!(window_plan(250, 100, WindowMode::Train).len(), 2);
        assert!(window_plan(99, 100, WindowMode::Train).is_empty());
    }

    #[test]
    fn evaluation_tail_window() {
        let plan = window_plan(250, 100, WindowMode::Eval);
        let starts: Vec<_> = plan.iter().map(|s| s.start).collect();
        assert_eq!(starts, vec![0, 100, 150]);
        assert_eq!(plan[2].score_from, 50);
        assert_eq!(scored(250, 100), (0..250).collect::<Vec<_>>());
        assert_eq!(scored(100, 100), (0..100).collect::<Vec<_>>());
        assert_eq!(scored(300, 100), (0..300).collect::<Vec<_>>());
        assert!(scored(99, 100).is_empty());
    }

    #[test]
    fn windows_slice_every_stream() {
        let clip = Sample {
            audio: Tensor::matrix(250, 1, (0..250).map(f64::from).collect()).unwrap(),
            video: Tensor::matrix(250, 2, (0..500).map(f64::from).collect()).unwrap(),
            labels: Tensor::zeros(&[250, 2]),
        };
        let short = Sample {
            audio: Tensor::zeros(&[99, 1]),
            video: Tensor::zeros(&[99, 2]),
            labels: Tensor::zeros(&[99, 2]),
        };
        let w = eval_windows(&[clip.clone(), short.clone()], 100);
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].sample.audio.row(0), &[150.0]);
        assert_eq!(w[2].sample.video.row(0), &[300.0, 301.0]);
        assert_eq!(train_windows(&[clip, short], 100).len(), 2);
    }

    proptest! {
        #[test]
        fn eval_covers_each_frame_once(len in 1usize..2000, seq_len in 1usize..300) {
            let got = scored(len, seq_len);
            if len < seq_len {
                prop_assert!(got.is_empty());
            } else {
                prop_assert_eq!(got, (0..len).collect::<Vec<_>>());
            }
        }
    }
}
