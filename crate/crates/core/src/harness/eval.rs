use std::io::Read;

use serde::{Deserialize, Serialize};

use super::train::PreparedData;
use super::HarnessError;
use crate::augment::{apply_one, AblationSpec, Modality, Strategy};
use crate::autodiff::Tensor;
use crate::data::{eval_windows, Sample};
use crate::metrics::{eval_summary, EvalSummary};
use crate::model::{predict, ModelConfig, ParameterSet};

/// Windows scored per forward pass.
const EVAL_BATCH: usize = 32;

pub const SWEEP_HEADER: &str = "strategy,modality,probability,seed,ccc_valence,ccc_arousal";

/// One evaluated grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub strategy: Strategy,
    pub modality: Modality,
    pub probability: f64,
    pub seed: u64,
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
}

impl SweepResult {
    pub fn mean_ccc(&self) -> f64 {
        (self.ccc_valence + self.ccc_arousal) / 2.0
    }
}

/// Scores every frame of `clips` exactly once. Corruption is applied per
/// evaluation window, keyed by the window's position in the clip list.
pub fn evaluate(
    params: &ParameterSet,
    model: &ModelConfig,
    clips: &[Sample],
    spec: &AblationSpec,
) -> Result<EvalSummary, HarnessError> {
    spec.validate()?;
    let windows = eval_windows(clips, model.seq_len);
    if windows.is_empty() {
        return Err(HarnessError::InvalidInput(format!(
            "no evaluation clip reaches {} frames",
            model.seq_len
        )));
    }
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let corrupted: Vec<Sample> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| apply_one(spec, i, &w.sample))
        .collect();
    for (chunk, spans) in corrupted.chunks(EVAL_BATCH).zip(windows.chunks(EVAL_BATCH)) {
        let audio = Tensor::concat_rows(&chunk.iter().map(|s| &s.audio).collect::<Vec<_>>())?;
        let video = Tensor::concat_rows(&chunk.iter().map(|s| &s.video).collect::<Vec<_>>())?;
        let out = predict(params, model, &audio, &video)?;
        for (j, (s, w)) in chunk.iter().zip(spans).enumerate() {
            let from = w.span.score_from * 2;
            let rows = &out.data()[j * model.seq_len * 2..(j + 1) * model.seq_len * 2];
            pred.extend_from_slice(&rows[from..]);
            gold.extend_from_slice(&s.labels.data()[from..]);
        }
    }
    let n = pred.len() / 2;
    let pred = Tensor::matrix(n, 2, pred)?;
    let gold = Tensor::matrix(n, 2, gold)?;
    Ok(eval_summary(&pred, &gold)?)
}

/// Fails with a dimension mismatch when `data` does not have the input
/// widths `model` was built for.
pub fn check_model_fits(model: &ModelConfig, data: &PreparedData) -> Result<(), HarnessError> {
    for (name, want, got) in [
        ("audio", model.d_audio, data.d_audio),
        ("video", model.d_video, data.d_video),
    ] {
        if want != got {
            return Err(HarnessError::DimensionMismatch(format!(
                "model expects {name} width {want} but the data provides {got}"
            )));
        }
    }
    Ok(())
}

/// Evaluates `clips` once per probability with the same sweep seed.
pub fn sweep(
    params: &ParameterSet,
    model: &ModelConfig,
    clips: &[Sample],
    strategy: Strategy,
    modality: Modality,
    probs: &[f64],
    seed: u64,
) -> Result<Vec<SweepResult>, HarnessError> {
    probs
        .iter()
        .map(|&probability| {
            let spec = AblationSpec {
                strategy,
                modality,
                probability,
                seed,
            };
            let s = evaluate(params, model, clips, &spec)?;
            Ok(SweepResult {
                strategy,
                modality,
                probability,
                seed,
                ccc_valence: s.ccc_valence,
                ccc_arousal: s.ccc_arousal,
            })
        })
        .collect()
}

/// Parses a comma-separated probability list such as `1.0,0.95,0`.
pub fn parse_probs(text: &str) -> Result<Vec<f64>, HarnessError> {
    let probs = text
        .split(',')
        .map(|p| {
            let v: f64 = p
                .trim()
                .parse()
                .map_err(|_| HarnessError::InvalidInput(format!("'{p}' is not a probability")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(HarnessError::InvalidInput(format!("probability {v} outside [0, 1]")));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if probs.is_empty() {
        return Err(HarnessError::InvalidInput("empty probability list".into()));
    }
    Ok(probs)
}

pub fn sweep_csv(rows: &[SweepResult]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{},{:?},{:?}\n",
            r.strategy, r.modality, r.probability, r.seed, r.ccc_valence, r.ccc_arousal
        ));
    }
    out
}

pub fn write_sweep_csv(rows: &[SweepResult], path: impl AsRef<std::path::Path>) -> Result<(), HarnessError> {
    std::fs::write(path, sweep_csv(rows))?;
    Ok(())
}

pub fn read_sweep_csv(reader: impl Read) -> Result<Vec<SweepResult>, HarnessError> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != SWEEP_HEADER {
        return Err(HarnessError::InvalidInput(format!(
            "expected sweep header '{SWEEP_HEADER}', got '{}'",
            header.join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| HarnessError::InvalidInput(format!("bad sweep row: {e}"))))
        .collect()
}
