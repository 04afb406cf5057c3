use log::info;
use rand::seq::SliceRandom;

use super::eval::evaluate;
use super::{HarnessError, RunConfig};
use crate::augment::{apply_one, AblationSpec};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::data::{apply_norm, fit_norm, sync_clip, train_windows, Dataset, NormStats, Sample};
use crate::metrics::{ccc_loss, EvalSummary};
use crate::model::{init_params, model_forward, ModelConfig, ParameterSet};
use crate::rng::{mix, stream};

pub const LOG_HEADER: &str = "epoch,train_loss,val_ccc_valence,val_ccc_arousal,val_ccc_mean";

/// Stream tag separating the shuffle RNG from every other use of the seed.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;

/// Normalised, synchronised data ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Training sequences of `seq_len` frames.
    pub train: Vec<Sample>,
    /// Whole validation clips; evaluation windows them itself.
    pub val: Vec<Sample>,
    pub norm: NormStats,
    pub d_audio: usize,
    pub d_video: usize,
}

/// Splits the clip list, fits normalisation on the training part, then
/// synchronises every clip and cuts training sequences.
pub fn prepare(dataset: &Dataset, config: &RunConfig) -> Result<PreparedData, HarnessError> {
    if dataset.is_empty() {
        return Err(HarnessError::InvalidInput("dataset has no clips".into()));
    }
    let (train_clips, val_clips) = dataset.split(config.splits.train, config.splits.val);
    if train_clips.is_empty() || val_clips.is_empty() {
        return Err(HarnessError::InvalidInput(format!(
            "split {}/{} of {} clips leaves an empty partition",
            config.splits.train,
            config.splits.val,
            dataset.len()
        )));
    }
    let norm = fit_norm(train_clips)?;
    let mut train = Vec::new();
    for clip in train_clips {
        let synced = sync_clip(&apply_norm(clip, &norm))?;
        train.extend(train_windows(std::slice::from_ref(&synced), config.train.seq_len));
    }
    let val = val_clips
        .iter()
        .map(|c| sync_clip(&apply_norm(c, &norm)))
        .collect::<Result<Vec<_>, _>>()?;
    if train.is_empty() {
        return Err(HarnessError::InvalidInput(format!(
            "no training clip reaches {} frames",
            config.train.seq_len
        )));
    }
    let first = &val[0];
    Ok(PreparedData {
        d_audio: first.audio.cols(),
        d_video: first.video.cols(),
        train,
        val,
        norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: EvalSummary,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?}",
            self.epoch,
            self.train_loss,
            self.val.ccc_valence,
            self.val.ccc_arousal,
            self.val.mean_ccc()
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation mean CCC.
    pub params: ParameterSet,
    pub model: ModelConfig,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for row in &self.log {
            out.push_str(&row.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Ablation applied to training sequences in `epoch`; a fresh stream per
/// epoch and per training seed.
fn epoch_spec(config: &RunConfig, epoch: usize) -> AblationSpec {
    AblationSpec {
        seed: mix(mix(config.ablation.seed, config.train.seed), epoch as u64),
        ..config.ablation
    }
}

fn train_batch(
    params: &mut ParameterSet,
    adam: &mut AdamState,
    adam_cfg: &AdamConfig,
    model: &ModelConfig,
    batch: &[Sample],
) -> Result<f64, HarnessError> {
    let stack = |f: fn(&Sample) -> &Tensor| Tensor::concat_rows(&batch.iter().map(f).collect::<Vec<_>>());
    let (audio, video, labels) = (stack(|s| &s.audio)?, stack(|s| &s.video)?, stack(|s| &s.labels)?);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let a = tape.constant(audio);
    let v = tape.constant(video);
    let gold = tape.constant(labels);
    let pred = model_forward(&mut tape, a, v, &bound, model)?;
    let loss = ccc_loss(&mut tape, pred, gold)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = bound.grads(&tape);
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    adam_step(&mut params.tensors_mut(), &grad_refs, adam, adam_cfg)?;
    Ok(value)
}

/// Trains from scratch and keeps the parameters of the best validation
/// epoch. Deterministic given the config.
pub fn train(config: &RunConfig, data: &PreparedData) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let model = config.resolve_model(data.d_audio, data.d_video)?;
    let mut params = init_params(&model, config.train.seed)?;
    let mut adam = AdamState::new(params.tensors());
    let adam_cfg = AdamConfig::with_lr(config.train.lr);

    let mut best: Option<(f64, usize, ParameterSet)> = None;
    let mut log = Vec::with_capacity(config.train.epochs);
    for epoch in 1..=config.train.epochs {
        let spec = epoch_spec(config, epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut stream(mix(config.train.seed, SHUFFLE_STREAM), epoch as u64));

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.train.batch_size) {
            // Window indices, not batch positions, key the corruption stream,
            // so a window's mask does not depend on the shuffle.
            let batch: Vec<Sample> = chunk.iter().map(|&i| apply_one(&spec, i, &data.train[i])).collect();
            loss_sum += train_batch(&mut params, &mut adam, &adam_cfg, &model, &batch)?;
            batches += 1;
        }
        let val = evaluate(&params, &model, &data.val, &AblationSpec::none())?;
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val,
        };
        info!(
            "epoch {epoch}: train loss {:.4}, val CCC {:.4}/{:.4}",
            row.train_loss, val.ccc_valence, val.ccc_arousal
        );
        log.push(row);
        let score = val.mean_ccc();
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        model,
        best_epoch,
        log,
    })
}
