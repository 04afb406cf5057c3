//! Concordance correlation coefficient (Lin's CCC).
//!
//! `ccc = 2·s_xy / (s_x² + s_y² + (μ_x − μ_y)²)` with biased (divide-by-N)
//! moments. A zero denominator yields 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("expected [N × 2] tensors, got {0:?} and {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooShort(x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    let denom = sxx / n + syy / n + (mx - my) * (mx - my);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * (sxy / n) / denom)
}

/// `1 − (CCC_valence + CCC_arousal) / 2` over all rows of `[N × 2]`
/// predictions and labels, recorded on the tape so it can be differentiated.
pub fn ccc_loss(tape: &mut Tape, pred: Var, gold: Var) -> Result<Var, MetricsError> {
    let (ps, gs) = (tape.shape(pred).to_vec(), tape.shape(gold).to_vec());
    if ps.len() != 2 || ps[1] != 2 || ps != gs {
        return Err(MetricsError::Shape(ps, gs));
    }
    if ps[0] < 2 {
        return Err(MetricsError::TooShort(ps[0]));
    }
    let v = column_ccc(tape, pred, gold, 0)?;
    let a = column_ccc(tape, pred, gold, 1)?;
    let total = tape.add(v, a)?;
    let mean = tape.scale(total, -0.5)?;
    let one = tape.constant(Tensor::scalar(1.0));
    Ok(tape.add(one, mean)?)
}

fn column_ccc(tape: &mut Tape, pred: Var, gold: Var, col: usize) -> Result<Var, TensorError> {
    let x = tape.slice_cols(pred, col, 1)?;
    let y = tape.slice_cols(gold, col, 1)?;
    let mx = tape.mean(x)?;
    let my = tape.mean(y)?;
    let xc = tape.sub_scalar(x, mx)?;
    let yc = tape.sub_scalar(y, my)?;
    let xx = tape.mul(xc, xc)?;
    let yy = tape.mul(yc, yc)?;
    let xy = tape.mul(xc, yc)?;
    let sxx = tape.mean(xx)?;
    let syy = tape.mean(yy)?;
    let sxy = tape.mean(xy)?;
    let gap = tape.sub(mx, my)?;
    let gap2 = tape.mul(gap, gap)?;
    let spread = tape.add(sxx, syy)?;
    let denom = tape.add(spread, gap2)?;
    if tape.value(denom).item() == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let num = tape.scale(sxy, 2.0)?;
    tape.div(num, denom)
}

/// Global CCC per attribute over every scored frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    pub n_frames: usize,
}

impl EvalSummary {
    pub fn mean_ccc(&self) -> f64 {
        (self.ccc_valence + self.ccc_arousal) / 2.0
    }
}

/// Scores `[N × 2]` predictions against labels (columns: valence, arousal).
pub fn eval_summary(pred: &Tensor, gold: &Tensor) -> Result<EvalSummary, MetricsError> {
    if pred.rank() != 2 || pred.cols() != 2 || gold.rank() != 2 || gold.cols() != 2 {
        return Err(MetricsError::Shape(pred.shape().to_vec(), gold.shape().to_vec()));
    }
    if pred.rows() != gold.rows() {
        return Err(MetricsError::LengthMismatch(pred.rows(), gold.rows()));
    }
    Ok(EvalSummary {
        ccc_valence: ccc(&pred.column(0), &gold.column(0))?,
        ccc_arousal: ccc(&pred.column(1), &gold.column(1))?,
        n_frames: pred.rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    fn two_col(a: &[f64], b: &[f64]) -> Tensor {
        let data = a.iter().zip(b).flat_map(|(x, y)| [*x, *y]).collect();
        Tensor::matrix(a.len(), 2, data).unwrap()
    }

    #[test]
    fn ccc_examples() {
        let x = [0.1, -0.4, 0.9, 0.3];
        assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(ccc(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.0);
        let v = ccc(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((v - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(ccc(&[2.0; 3], &[2.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn ccc_errors() {
        assert_eq!(ccc(&[1.0, 2.0], &[1.0]), Err(MetricsError::LengthMismatch(2, 1)));
        assert_eq!(ccc(&[1.0], &[1.0]), Err(MetricsError::TooShort(1)));
    }

    #[test]
    fn loss_examples() {
        let g = two_col(&[0.1, 0.5, -0.3, 0.2], &[-0.6, 0.2, 0.4, 0.0]);
        let mut tape = Tape::new();
        let p = tape.constant(g.clone());
        let gv = tape.constant(g);
        let loss = ccc_loss(&mut tape, p, gv).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        let pred = two_col(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        let gold = two_col(&[2.0, 3.0, 4.0], &[2.0, 3.0, 4.0]);
        let p = tape.constant(pred);
        let gv = tape.constant(gold);
        let loss = ccc_loss(&mut tape, p, gv).unwrap();
        assert!((tape.value(loss).item() - 3.0 / 7.0).abs() < 1e-12);

        let bad = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(ccc_loss(&mut tape, bad, gv), Err(MetricsError::Shape(..))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let n = 50;
        let pred = Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let gold = Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

        let mut tape = Tape::new();
        let p = tape.param(pred.clone());
        let g = tape.constant(gold.clone());
        let loss = ccc_loss(&mut tape, p, g).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(p).unwrap();

        let eval = |t: &Tensor| {
            let mut tape = Tape::new();
            let p = tape.constant(t.clone());
            let g = tape.constant(gold.clone());
            let l = ccc_loss(&mut tape, p, g).unwrap();
            tape.value(l).item()
        };
        let h = 1e-5;
        for i in 0..2 * n {
            let mut plus = pred.clone();
            plus.data_mut()[i] += h;
            let mut minus = pred.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "element {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn summary_examples() {
        let gold = two_col(&[0.1, 0.5, -0.3, 0.2], &[-0.6, 0.2, 0.4, 0.0]);
        let s = eval_summary(&gold, &gold).unwrap();
        assert!((s.ccc_valence - 1.0).abs() < 1e-15 && (s.ccc_arousal - 1.0).abs() < 1e-15);
        assert_eq!(s.n_frames, 4);

        let mv = 0.5 / 4.0;
        let ma = 0.0;
        let flat = two_col(&[mv; 4], &[ma; 4]);
        let s = eval_summary(&flat, &gold).unwrap();
        assert_eq!((s.ccc_valence, s.ccc_arousal), (0.0, 0.0));

        let short = two_col(&[0.0; 3], &[0.0; 3]);
        assert!(matches!(
            eval_summary(&short, &gold),
            Err(MetricsError::LengthMismatch(3, 4))
        ));
    }

    #[test]
    fn attenuation_against_pearson_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000);
        for _ in 0..1000 {
            let n = rng.random_range(2..40);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..3.0)).collect();
            let c = ccc(&x, &y).unwrap();
            let r = pearson(&x, &y);
            assert!(c.abs() <= r.abs() + 1e-12 && r.abs() <= 1.0 + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn symmetric(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..60)) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!((ccc(&x, &y).unwrap() - ccc(&y, &x).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn penalises_scale_and_shift(
            x in prop::collection::vec(-5.0f64..5.0, 3..40),
            a in 0.2f64..3.0,
            b in -2.0f64..2.0,
        ) {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            prop_assume!(x.iter().map(|v| (v - m).powi(2)).sum::<f64>() > 1e-3);
            prop_assume!((a - 1.0).abs() > 1e-3 || b.abs() > 1e-3);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!(ccc(&x, &y).unwrap() < 1.0);
        }

        #[test]
        fn permutation_invariant(
            pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (xs, ys): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
            prop_assert!((ccc(&x, &y).unwrap() - ccc(&xs, &ys).unwrap()).abs() < 1e-12);
        }
    }
}
