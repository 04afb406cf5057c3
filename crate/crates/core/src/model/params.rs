use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Branch, ModelConfig, ModelError};
use crate::autodiff::{Tape, Tensor, Var};

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Glorot-uniform matrix.
    Weight,
    /// Zero vector.
    Bias,
    /// Layer-norm gain, ones.
    Gain,
    /// Fusion scalar, starts at 1.
    Fusion,
}

/// Every parameter name with its shape and init rule, in name order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let d = config.d_model;
    let ffn = config.ffn_mult * d;
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, kind| out.push((name, shape, kind));

    for (branch, d_in) in [(Branch::Audio, config.d_audio), (Branch::Video, config.d_video)] {
        let p = branch.prefix();
        add(format!("{p}.input.w"), vec![d_in, d], Weight);
        add(format!("{p}.input.b"), vec![d], Bias);
        for l in 0..config.num_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                add(format!("{p}.layers.{l}.attn.{w}"), vec![d, d], Weight);
            }
            add(format!("{p}.layers.{l}.ln1.gain"), vec![d], Gain);
            add(format!("{p}.layers.{l}.ln1.bias"), vec![d], Bias);
            add(format!("{p}.layers.{l}.ffn.w1"), vec![d, ffn], Weight);
            add(format!("{p}.layers.{l}.ffn.b1"), vec![ffn], Bias);
            add(format!("{p}.layers.{l}.ffn.w2"), vec![ffn, d], Weight);
            add(format!("{p}.layers.{l}.ffn.b2"), vec![d], Bias);
            add(format!("{p}.layers.{l}.ln2.gain"), vec![d], Gain);
            add(format!("{p}.layers.{l}.ln2.bias"), vec![d], Bias);
        }
    }
    for q in ["audio_query", "video_query"] {
        for w in ["wq", "wk", "wv", "wo"] {
            add(format!("cross.{q}.{w}"), vec![d, d], Weight);
        }
    }
    add("fusion.alpha".into(), vec![1], Fusion);
    add("fusion.beta".into(), vec![1], Fusion);
    add("head.w".into(), vec![d, 2], Weight);
    add("head.b".into(), vec![2], Bias);

    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Named learnable tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.values_mut().collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copy with every value rounded through `f32`, i.e. what a checkpoint
    /// round-trip yields.
    pub fn round_to_f32(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.round_to_f32()))
                .collect(),
        }
    }

    /// Checks names and shapes against what `config` requires.
    pub fn check_against(&self, config: &ModelConfig) -> Result<(), String> {
        let expected = param_shapes(config);
        if expected.len() != self.len() {
            return Err(format!(
                "config implies {} parameters, found {}",
                expected.len(),
                self.len()
            ));
        }
        for (name, shape, _) in &expected {
            match self.get(name) {
                None => return Err(format!("missing parameter '{name}'")),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(format!(
                        "parameter '{name}' has shape {:?}, config implies {shape:?}",
                        t.shape()
                    ))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a bound [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients after backward, in name order. Parameters that did not
    /// reach the loss get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .values()
            .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}

/// Glorot-uniform weights, zero biases, unit gains and `alpha = beta = 1`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for (name, shape, kind) in param_shapes(config) {
        let value = match kind {
            ParamKind::Weight => {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let n = shape[0] * shape[1];
                let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(shape, data)?
            }
            ParamKind::Bias => Tensor::zeros(&shape),
            ParamKind::Gain | ParamKind::Fusion => Tensor::filled(&shape, 1.0),
        };
        params.insert(name, value);
    }
    Ok(params)
}
