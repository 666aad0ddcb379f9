//! Gumbel-Softmax relaxation of per-frame unit choice.

use rand::Rng;

use super::{LogitSequence, OneHotSequence};
use crate::autodiff::{Tape, Var};
use crate::error::{NastError, Result};
use crate::tensor::Matrix;

/// One standard Gumbel draw, `-ln(-ln U)` with `U` in the open unit interval.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let u = u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    -(-u.ln()).ln()
}

/// A `rows x cols` matrix of independent Gumbel draws.
pub fn gumbel_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| gumbel(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// One-hot rows of the row-wise argmax (lowest index on ties).
pub fn hard_one_hot(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (r, c) in m.argmax_rows().into_iter().enumerate() {
        out.set(r, c, 1.0);
    }
    out
}

/// Records `softmax((logits + noise) / tau)` on the tape; with `hard`, the
/// forward value is the argmax one-hot and gradients pass straight through
/// to the soft sample. Returns `(sample, soft)`.
pub fn gumbel_softmax_on_tape(
    t: &mut Tape,
    logits: Var,
    noise: Matrix,
    tau: f64,
    hard: bool,
) -> (Var, Var) {
    let g = t.constant(noise);
    let perturbed = t.add(logits, g);
    let scaled = t.scale(perturbed, 1.0 / tau);
    let soft = t.softmax_rows(scaled);
    if hard {
        let h = hard_one_hot(t.value(soft));
        (t.straight_through(soft, h), soft)
    } else {
        (soft, soft)
    }
}

/// Gumbel-Softmax with explicit noise, outside any tape.
pub fn gumbel_softmax_with_noise(
    logits: &LogitSequence,
    noise: &Matrix,
    tau: f64,
    hard: bool,
) -> Result<OneHotSequence> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(NastError::InvalidParameter(format!("temperature must be > 0, got {tau}")));
    }
    if noise.shape() != logits.logits.shape() {
        return Err(NastError::dims(logits.logits.len(), noise.len(), "gumbel noise shape"));
    }
    let params = crate::autodiff::Params::new();
    let mut t = Tape::new(&params);
    let l = t.constant(logits.logits.clone());
    let (sample, _) = gumbel_softmax_on_tape(&mut t, l, noise.clone(), tau, hard);
    Ok(OneHotSequence {
        vectors: t.value(sample).clone(),
        hard,
    })
}

/// Draws Gumbel noise from `rng` and applies [`gumbel_softmax_with_noise`].
pub fn gumbel_sample<R: Rng + ?Sized>(
    logits: &LogitSequence,
    tau: f64,
    rng: &mut R,
    hard: bool,
) -> Result<OneHotSequence> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(NastError::InvalidParameter(format!("temperature must be > 0, got {tau}")));
    }
    let (r, c) = logits.logits.shape();
    let noise = gumbel_noise(r, c, rng);
    gumbel_softmax_with_noise(logits, &noise, tau, hard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(rows: &[&[f64]]) -> LogitSequence {
        LogitSequence {
            logits: Matrix::from_rows(rows).unwrap(),
            utterance_id: "u".into(),
        }
    }

    #[test]
    fn zero_noise_symmetric_logits_split_evenly() {
        let l = logits(&[&[0.0, 0.0]]);
        let out = gumbel_softmax_with_noise(&l, &Matrix::zeros(1, 2), 1.0, false).unwrap();
        assert_eq!(out.vectors.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn tiny_temperature_approaches_argmax() {
        let l = logits(&[&[0.3, 1.0, -0.2], &[2.0, 0.1, 0.5]]);
        let noise = Matrix::from_rows(&[[0.5, -0.4, 0.0], [0.0, 0.0, 1.6]]).unwrap();
        let out = gumbel_softmax_with_noise(&l, &noise, 1e-6, false).unwrap();
        assert!(out.vectors.max_abs_diff(&Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap()) < 1e-9);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let l = logits(&[&[0.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gumbel_sample(&l, 0.0, &mut rng, false).is_err());
        assert!(gumbel_sample(&l, -1.0, &mut rng, true).is_err());
    }

    #[test]
    fn hard_rows_match_soft_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = LogitSequence {
            logits: gumbel_noise(50, 6, &mut rng),
            utterance_id: "u".into(),
        };
        let noise = gumbel_noise(50, 6, &mut rng);
        let soft = gumbel_softmax_with_noise(&l, &noise, 0.7, false).unwrap();
        let hard = gumbel_softmax_with_noise(&l, &noise, 0.7, true).unwrap();
        assert_eq!(hard.vectors.argmax_rows(), soft.vectors.argmax_rows());
        for row in hard.vectors.row_iter() {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
        }
    }

    #[test]
    fn reproducible_per_rng() {
        let l = logits(&[&[0.1, 0.2, 0.3]]);
        let a = gumbel_sample(&l, 0.5, &mut ChaCha8Rng::seed_from_u64(3), false).unwrap();
        let b = gumbel_sample(&l, 0.5, &mut ChaCha8Rng::seed_from_u64(3), false).unwrap();
        assert_eq!(a, b);
    }
}
