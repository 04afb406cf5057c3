use rand::Rng;

use super::HarnessError;
use crate::autodiff::{OpKind, Tape, Tensor};
use crate::metrics::ccc_loss;
use crate::model::{init_params, model_forward, ModelConfig, ParameterSet};
use crate::rng::stream;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Denominator floor so that near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Largest element-wise relative error per parameter, in name order.
    pub per_param: Vec<(String, f64)>,
    pub worst_param: String,
    pub worst_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst_error < GRADCHECK_TOLERANCE
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        d_model: 8,
        num_heads: 2,
        ffn_mult: 2,
        d_audio: 5,
        d_video: 4,
        seq_len: 6,
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

struct Problem {
    model: ModelConfig,
    audio: Tensor,
    video: Tensor,
    labels: Tensor,
}

impl Problem {
    fn grads(&self, params: &ParameterSet, fault: Option<OpKind>) -> Result<Vec<Tensor>, HarnessError> {
        let mut tape = Tape::new();
        if let Some(kind) = fault {
            tape.inject_fault(kind);
        }
        let bound = params.bind(&mut tape, true);
        let a = tape.constant(self.audio.clone());
        let v = tape.constant(self.video.clone());
        let gold = tape.constant(self.labels.clone());
        let pred = model_forward(&mut tape, a, v, &bound, &self.model)?;
        let loss = ccc_loss(&mut tape, pred, gold)?;
        tape.backward(loss)?;
        Ok(bound.grads(&tape))
    }

    fn value(&self, params: &ParameterSet) -> Result<f64, HarnessError> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let a = tape.constant(self.audio.clone());
        let v = tape.constant(self.video.clone());
        let gold = tape.constant(self.labels.clone());
        let pred = model_forward(&mut tape, a, v, &bound, &self.model)?;
        let loss = ccc_loss(&mut tape, pred, gold)?;
        Ok(tape.value(loss).item())
    }
}

/// Compares reverse-mode gradients of the full CCC loss on a small model
/// with central finite differences, for every element of every parameter.
/// `fault` corrupts one backward rule, to show the check can fail.
pub fn gradcheck(seed: u64, fault: Option<OpKind>) -> Result<GradcheckReport, HarnessError> {
    let model = small_model();
    let params = init_params(&model, seed)?;
    let mut rng = stream(seed, 1);
    let problem = Problem {
        audio: random_matrix(model.seq_len, model.d_audio, &mut rng),
        video: random_matrix(model.seq_len, model.d_video, &mut rng),
        labels: random_matrix(model.seq_len, 2, &mut rng),
        model,
    };
    let grads = problem.grads(&params, fault)?;

    let mut per_param = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for ((name, tensor), grad) in params.iter().zip(&grads) {
        let mut worst: f64 = 0.0;
        for i in 0..tensor.numel() {
            let original = tensor.data()[i];
            probe.get_mut(name).expect("same names").data_mut()[i] = original + STEP;
            let plus = problem.value(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = original - STEP;
            let minus = problem.value(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grad.data()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
        per_param.push((name.to_string(), worst));
    }
    let (worst_param, worst_error) =
        per_param.iter().fold(
            (String::new(), -1.0),
            |acc, (n, e)| if *e > acc.1 { (n.clone(), *e) } else { acc },
        );
    Ok(GradcheckReport {
        per_param,
        worst_param,
        worst_error,
    })
}
