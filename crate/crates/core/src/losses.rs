//! The training objectives and their weighted sum.
//!
//! Each loss exists as a tape operation (for training) and as a plain
//! function evaluated through the same kernel.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Params, Reduction, Tape, Var};
use crate::error::{NastError, Result};
use crate::featureio::FeatureSequence;
use crate::interp::{interpolation_matrix, resample_rows};
use crate::model::OneHotSequence;
use crate::tensor::Matrix;

/// One evaluation of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub robust: f64,
    pub diversity: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `recon + lambda1 * diversity + lambda2 * robust`.
pub fn total_loss(
    recon: f64,
    diversity: f64,
    robust: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("recon", recon),
        ("diversity", diversity),
        ("robust", robust),
        ("lambda1", lambda1),
        ("lambda2", lambda2),
    ] {
        if !v.is_finite() {
            return Err(NastError::InvalidParameter(format!("{name} is not finite: {v}")));
        }
    }
    Ok(LossBreakdown {
        recon,
        robust,
        diversity,
        total: recon + lambda1 * diversity + lambda2 * robust,
        lambda1,
        lambda2,
    })
}

/// Mean over frames of the per-frame mean absolute error.
pub fn reconstruction_loss(decoded: &Matrix, target: &FeatureSequence) -> Result<f64> {
    let tm = target.to_matrix();
    if decoded.shape() != tm.shape() {
        return Err(NastError::dims(tm.len(), decoded.len(), "decoded vs target shape"));
    }
    let params = Params::new();
    let mut t = Tape::new(&params);
    let d = t.constant(decoded.clone());
    let l = reconstruction_on_tape(&mut t, d, tm);
    Ok(t.scalar(l))
}

/// With equal frame widths the frame-mean of per-frame means is the global mean.
pub fn reconstruction_on_tape(t: &mut Tape, decoded: Var, target: Matrix) -> Var {
    t.l1_mean(decoded, target)
}

/// Linearly resamples `T' x k` augmented logits to `target_len` rows.
pub fn interpolate_logits(aug_logits: &Matrix, target_len: usize) -> Result<Matrix> {
    if aug_logits.rows() == 0 || target_len == 0 {
        return Err(NastError::Empty("logit interpolation needs non-empty input".into()));
    }
    Ok(resample_rows(aug_logits, target_len))
}

fn check_robust_inputs(clean: &OneHotSequence, aug_logits: &Matrix) -> Result<()> {
    if clean.vectors.cols() != aug_logits.cols() {
        return Err(NastError::dims(
            clean.vectors.cols(),
            aug_logits.cols(),
            "unit count of clean targets vs augmented logits",
        ));
    }
    if clean.vectors.rows() == 0 || aug_logits.rows() == 0 {
        return Err(NastError::Empty("robustness loss inputs".into()));
    }
    Ok(())
}

/// Cross-entropy between the clean one-hots (argmax of each row, treated as
/// fixed targets) and the softmax of the time-aligned augmented logits,
/// summed over frames.
pub fn robustness_loss(clean: &OneHotSequence, aug_logits: &Matrix) -> Result<f64> {
    robustness_loss_with(clean, aug_logits, Reduction::Sum)
}

pub fn robustness_loss_with(
    clean: &OneHotSequence,
    aug_logits: &Matrix,
    reduction: Reduction,
) -> Result<f64> {
    check_robust_inputs(clean, aug_logits)?;
    let params = Params::new();
    let mut t = Tape::new(&params);
    let a = t.constant(aug_logits.clone());
    let l = robustness_on_tape(&mut t, &clean.vectors.argmax_rows(), a, reduction);
    Ok(t.scalar(l))
}

/// Tape form: `targets` are unit ids (length `T`), `aug_logits` is `T' x k`.
pub fn robustness_on_tape(
    t: &mut Tape,
    targets: &[usize],
    aug_logits: Var,
    reduction: Reduction,
) -> Var {
    let src = t.value(aug_logits).rows();
    let aligned = if src == targets.len() {
        aug_logits
    } else {
        let w = t.constant(interpolation_matrix(src, targets.len()));
        t.matmul(w, aug_logits)
    };
    t.cross_entropy(aligned, targets.to_vec(), reduction)
}

/// `(1/k) Σ_i p̄_i ln p̄_i` over the temporal mean usage `p̄`.
pub fn diversity_loss(clean: &OneHotSequence) -> f64 {
    let params = Params::new();
    let mut t = Tape::new(&params);
    let p = t.constant(clean.vectors.clone());
    let l = t.diversity(p);
    t.scalar(l)
}

pub fn diversity_on_tape(t: &mut Tape, probs: Var) -> Var {
    t.diversity(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn onehots(units: &[u32], k: usize) -> OneHotSequence {
        OneHotSequence::from_units(units, k)
    }

    #[test]
    fn reconstruction_examples() {
        let target = FeatureSequence::new("t", 1, 2, vec![0.0, 5.0]).unwrap();
        let decoded = Matrix::from_rows(&[[1.0, 3.0]]).unwrap();
        assert!((reconstruction_loss(&decoded, &target).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(reconstruction_loss(&target.to_matrix(), &target).unwrap(), 0.0);
        let shifted = target.to_matrix().map(|x| x - 0.25);
        assert!((reconstruction_loss(&shifted, &target).unwrap() - 0.25).abs() < 1e-12);
        assert!(reconstruction_loss(&Matrix::zeros(2, 2), &target).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let m = Matrix::from_rows(&[[0.0], [2.0]]).unwrap();
        assert_eq!(interpolate_logits(&m, 3).unwrap().as_slice(), &[0.0, 1.0, 2.0]);
        assert_eq!(interpolate_logits(&m, 2).unwrap(), m);
        let one = Matrix::from_rows(&[[5.0, 7.0]]).unwrap();
        let b = interpolate_logits(&one, 4).unwrap();
        for r in b.row_iter() {
            assert_eq!(r, &[5.0, 7.0]);
        }
        assert!(interpolate_logits(&Matrix::zeros(0, 3), 3).is_err());
    }

    #[test]
    fn robustness_examples() {
        // saturated correct logits
        let targets = onehots(&[2, 0, 1], 3);
        let mut logits = Matrix::zeros(3, 3);
        for (t, u) in [2, 0, 1].into_iter().enumerate() {
            logits.set(t, u, 30.0);
        }
        assert!(robustness_loss(&targets, &logits).unwrap() <= 3e-9);

        // uniform logits: ln k per frame
        let l = robustness_loss(&onehots(&[0, 3], 4), &Matrix::zeros(2, 4)).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);

        let l = robustness_loss(&onehots(&[0], 2), &Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);

        assert!(robustness_loss(&onehots(&[0], 2), &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn mean_reduction_divides_by_frames() {
        let t = onehots(&[0, 1, 1], 2);
        let a = Matrix::from_rows(&[[0.3, -0.1], [1.0, 0.2]]).unwrap();
        let s = robustness_loss_with(&t, &a, Reduction::Sum).unwrap();
        let m = robustness_loss_with(&t, &a, Reduction::Mean).unwrap();
        assert!((s / 3.0 - m).abs() < 1e-12);
    }

    #[test]
    fn diversity_examples() {
        let uniform = onehots(&[0, 1, 2, 3], 4);
        assert!((diversity_loss(&uniform) + 4f64.ln() / 4.0).abs() < 1e-12);
        assert_eq!(diversity_loss(&onehots(&[2, 2, 2], 4)), 0.0);
        let mut units = vec![0u32; 9];
        units.push(1);
        let v = diversity_loss(&onehots(&units, 2));
        let expected = (0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln()) / 2.0;
        assert!((v - expected).abs() < 1e-12);
        assert!((v + 0.1625).abs() < 1e-4);
    }

    #[test]
    fn total_examples() {
        let b = total_loss(1.0, -0.3, 2.0, 1.0, 0.005).unwrap();
        assert!((b.total - 0.71).abs() < 1e-12);
        assert_eq!(total_loss(0.4, -0.2, 9.0, 0.0, 0.0).unwrap().total, 0.4);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 1.0, 0.005).unwrap().total, 0.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 1.0, 1.0).is_err());
    }

    fn soft_rows(raw: &[f64], k: usize) -> OneHotSequence {
        let m = Matrix::from_vec(raw.len() / k, k, raw.to_vec()).unwrap();
        OneHotSequence {
            vectors: crate::autodiff::softmax_rows(&m),
            hard: false,
        }
    }

    proptest! {
        #[test]
        fn diversity_within_bounds(raw in proptest::collection::vec(-5.0f64..5.0, 4 * 6)) {
            let v = diversity_loss(&soft_rows(&raw, 4));
            prop_assert!(v <= 1e-12);
            prop_assert!(v >= -(4f64.ln()) / 4.0 - 1e-12);
        }

        #[test]
        fn robustness_splits_over_frames(
            units in proptest::collection::vec(0u32..3, 1..8),
            raw in proptest::collection::vec(-3.0f64..3.0, 3 * 5),
        ) {
            let aug = Matrix::from_vec(5, 3, raw).unwrap();
            let clean = onehots(&units, 3);
            let whole = robustness_loss(&clean, &aug).unwrap();
            let aligned = interpolate_logits(&aug, units.len()).unwrap();
            let parts: f64 = units
                .iter()
                .enumerate()
                .map(|(t, &u)| {
                    let row = Matrix::row_vector(aligned.row(t));
                    robustness_loss(&onehots(&[u], 3), &row).unwrap()
                })
                .sum();
            prop_assert!((whole - parts).abs() < 1e-9);
        }

        #[test]
        fn interpolation_keeps_endpoints(src in 2usize..12, dst in 2usize..12, seed in 0u64..1000) {
            let data: Vec<f64> = (0..src * 2).map(|i| ((i as u64 * 7919 + seed) % 101) as f64).collect();
            let m = Matrix::from_vec(src, 2, data).unwrap();
            let out = interpolate_logits(&m, dst).unwrap();
            prop_assert_eq!(out.row(0), m.row(0));
            prop_assert!(out.row(dst - 1).iter().zip(m.row(src - 1)).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }
}
