use super::{BoundParams, Branch, ModelConfig, ModelError, ParameterSet};
use crate::autodiff::{Tape, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Sinusoidal position table, `[seq_len × d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    table: Tensor,
}

impl PositionalEncoding {
    pub fn new(seq_len: usize, d_model: usize) -> Self {
        let mut table = Tensor::zeros(&[seq_len, d_model]);
        for pos in 0..seq_len {
            let row = table.row_mut(pos);
            for i in (0..d_model).step_by(2) {
                let freq = 10000f64.powf(-(i as f64) / d_model as f64);
                let angle = pos as f64 * freq;
                row[i] = angle.sin();
                if i + 1 < d_model {
                    row[i + 1] = angle.cos();
                }
            }
        }
        Self { table }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

/// Projection matrices of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttentionWeights {
    pub fn lookup(params: &BoundParams, prefix: &str) -> Result<Self, ModelError> {
        Ok(Self {
            wq: params.get(&format!("{prefix}.wq"))?,
            wk: params.get(&format!("{prefix}.wk"))?,
            wv: params.get(&format!("{prefix}.wv"))?,
            wo: params.get(&format!("{prefix}.wo"))?,
        })
    }
}

/// Scaled dot-product attention with queries from `q_src` and keys/values
/// from `kv_src`. The softmax runs over the key axis.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    w: &AttentionWeights,
    num_heads: usize,
) -> Result<Var, ModelError> {
    attention(tape, q_src, kv_src, w, num_heads, None)
}

/// [`multi_head_attention`] over stacks of sequences: both inputs hold the
/// same number of consecutive `seq_len`-row sequences, and each query
/// sequence attends only to its own key sequence. Projections run on the
/// whole stack.
pub fn stacked_attention(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    w: &AttentionWeights,
    num_heads: usize,
    seq_len: usize,
) -> Result<Var, ModelError> {
    attention(tape, q_src, kv_src, w, num_heads, Some(seq_len))
}

fn attention(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    w: &AttentionWeights,
    num_heads: usize,
    seq_len: Option<usize>,
) -> Result<Var, ModelError> {
    let d = tape.shape(w.wq)[0];
    for (what, v) in [("query source", q_src), ("key/value source", kv_src)] {
        let s = tape.shape(v);
        let rows_ok = seq_len.is_none_or(|t| s.first().is_some_and(|r| r % t == 0));
        if s.len() != 2 || s[1] != d || !rows_ok {
            return Err(ModelError::InputShape {
                what,
                expected: vec![seq_len.unwrap_or_else(|| s.first().copied().unwrap_or(0)), d],
                got: s.to_vec(),
            });
        }
    }
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(ModelError::InvalidConfig(format!(
            "d_model {d} is not divisible by {num_heads} heads"
        )));
    }
    let (q_rows, kv_rows) = (tape.shape(q_src)[0], tape.shape(kv_src)[0]);
    let count = match seq_len {
        Some(t) if q_rows == kv_rows => q_rows / t,
        Some(_) => {
            return Err(ModelError::InputShape {
                what: "key/value source",
                expected: vec![q_rows, d],
                got: vec![kv_rows, d],
            })
        }
        None => 1,
    };
    let scale = 1.0 / ((d / num_heads) as f64).sqrt();

    // Scaling the queries once is cheaper than scaling every score matrix.
    let q = tape.matmul(q_src, w.wq)?;
    let q = tape.scale(q, scale)?;
    let k = tape.matmul(kv_src, w.wk)?;
    let v = tape.matmul(kv_src, w.wv)?;
    let joined = tape.attention(q, k, v, count, num_heads)?;
    Ok(tape.matmul(joined, w.wo)?)
}

/// Number of `config.seq_len`-frame sequences stacked in `v`.
fn stacked_count(
    tape: &Tape,
    v: Var,
    width: usize,
    what: &'static str,
    config: &ModelConfig,
) -> Result<usize, ModelError> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] != width || s[0] == 0 || !s[0].is_multiple_of(config.seq_len) {
        return Err(ModelError::InputShape {
            what,
            expected: vec![config.seq_len, width],
            got: s.to_vec(),
        });
    }
    Ok(s[0] / config.seq_len)
}

/// Input projection, positional encoding, then post-norm self-attention
/// blocks with a relu feed-forward. `x` stacks one or more sequences of
/// `config.seq_len` frames; each is encoded independently.
pub fn encoder_forward(
    tape: &mut Tape,
    x: Var,
    params: &BoundParams,
    branch: Branch,
    config: &ModelConfig,
) -> Result<Var, ModelError> {
    let p = branch.prefix();
    let w_in = params.get(&format!("{p}.input.w"))?;
    let what = match branch {
        Branch::Audio => "audio features",
        Branch::Video => "video features",
    };
    let count = stacked_count(tape, x, tape.shape(w_in)[0], what, config)?;

    let h = tape.linear(x, w_in, params.get(&format!("{p}.input.b"))?)?;
    let pe = PositionalEncoding::new(config.seq_len, config.d_model).table;
    let pe = if count == 1 {
        pe
    } else {
        Tensor::matrix(count * config.seq_len, config.d_model, pe.data().repeat(count))?
    };
    let pe = tape.constant(pe);
    let mut h = tape.add(h, pe)?;

    for l in 0..config.num_layers {
        let pre = format!("{p}.layers.{l}");
        let attn = AttentionWeights::lookup(params, &format!("{pre}.attn"))?;
        let a = stacked_attention(tape, h, h, &attn, config.num_heads, config.seq_len)?;
        let res = tape.add(h, a)?;
        h = tape.layer_norm(
            res,
            params.get(&format!("{pre}.ln1.gain"))?,
            params.get(&format!("{pre}.ln1.bias"))?,
            LAYER_NORM_EPS,
        )?;

        let f = tape.linear(
            h,
            params.get(&format!("{pre}.ffn.w1"))?,
            params.get(&format!("{pre}.ffn.b1"))?,
        )?;
        let f = tape.relu(f)?;
        let f = tape.linear(
            f,
            params.get(&format!("{pre}.ffn.w2"))?,
            params.get(&format!("{pre}.ffn.b2"))?,
        )?;
        let res = tape.add(h, f)?;
        h = tape.layer_norm(
            res,
            params.get(&format!("{pre}.ln2.gain"))?,
            params.get(&format!("{pre}.ln2.bias"))?,
            LAYER_NORM_EPS,
        )?;
    }
    Ok(h)
}

/// `(enc_a + alpha·X_a) + (enc_v + beta·X_v)` where `X_a` attends from audio
/// to video and `X_v` from video to audio, sequence by sequence.
pub fn cross_modal_fuse(
    tape: &mut Tape,
    enc_a: Var,
    enc_v: Var,
    params: &BoundParams,
    config: &ModelConfig,
) -> Result<Var, ModelError> {
    if tape.shape(enc_a) != tape.shape(enc_v) {
        return Err(ModelError::InputShape {
            what: "video encoding",
            expected: tape.shape(enc_a).to_vec(),
            got: tape.shape(enc_v).to_vec(),
        });
    }
    let audio_q = AttentionWeights::lookup(params, "cross.audio_query")?;
    let video_q = AttentionWeights::lookup(params, "cross.video_query")?;
    let (heads, t) = (config.num_heads, config.seq_len);
    let x_a = stacked_attention(tape, enc_a, enc_v, &audio_q, heads, t)?;
    let x_v = stacked_attention(tape, enc_v, enc_a, &video_q, heads, t)?;

    let x_a = tape.mul_scalar(x_a, params.get("fusion.alpha")?)?;
    let x_v = tape.mul_scalar(x_v, params.get("fusion.beta")?)?;
    let audio = tape.add(enc_a, x_a)?;
    let video = tape.add(enc_v, x_v)?;
    Ok(tape.add(audio, video)?)
}

/// Per-frame `[N × 2]` valence/arousal predictions. The inputs stack
/// `N / seq_len` sequences row-wise; sequences do not interact.
pub fn model_forward(
    tape: &mut Tape,
    audio: Var,
    video: Var,
    params: &BoundParams,
    config: &ModelConfig,
) -> Result<Var, ModelError> {
    let n_a = stacked_count(tape, audio, config.d_audio, "audio features", config)?;
    let n_v = stacked_count(tape, video, config.d_video, "video features", config)?;
    if n_a != n_v {
        return Err(ModelError::InputShape {
            what: "video features",
            expected: vec![n_a * config.seq_len, config.d_video],
            got: tape.shape(video).to_vec(),
        });
    }
    let enc_a = encoder_forward(tape, audio, params, Branch::Audio, config)?;
    let enc_v = encoder_forward(tape, video, params, Branch::Video, config)?;
    let fused = cross_modal_fuse(tape, enc_a, enc_v, params, config)?;
    Ok(tape.linear(fused, params.get("head.w")?, params.get("head.b")?)?)
}

/// Inference without gradient tracking, for one sequence or a row-wise
/// stack of them.
pub fn predict(
    params: &ParameterSet,
    config: &ModelConfig,
    audio: &Tensor,
    video: &Tensor,
) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let a = tape.constant(audio.clone());
    let v = tape.constant(video.clone());
    let out = model_forward(&mut tape, a, v, &bound, config)?;
    Ok(tape.value(out).clone())
}
