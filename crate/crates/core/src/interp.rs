//! Linear resampling of row sequences along time.
//!
//! Output row `t` of a length-`dst` sequence reads source position
//! `t * (src - 1) / (dst - 1)`. A single output row reads the middle of the
//! source; a single source row is broadcast.

use crate::tensor::Matrix;

fn source_position(t: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        (src as f64 - 1.0) / 2.0
    } else {
        t as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
    }
}

/// `(lo, hi, frac)` for every output row.
fn taps(src: usize, dst: usize) -> impl Iterator<Item = (usize, usize, f64)> {
    (0..dst).map(move |t| {
        let s = source_position(t, src, dst);
        let lo = (s.floor() as usize).min(src - 1);
        let hi = (s.ceil() as usize).min(src - 1);
        (lo, hi, s - lo as f64)
    })
}

/// The `dst x src` matrix `W` with `W * x` resampling `x` to `dst` rows.
pub fn interpolation_matrix(src: usize, dst: usize) -> Matrix {
    assert!(src >= 1 && dst >= 1);
    let mut w = Matrix::zeros(dst, src);
    for (t, (lo, hi, frac)) in taps(src, dst).enumerate() {
        w.set(t, lo, w.get(t, lo) + 1.0 - frac);
        w.set(t, hi, w.get(t, hi) + frac);
    }
    w
}

/// Resamples the rows of `m` to `dst` rows.
pub fn resample_rows(m: &Matrix, dst: usize) -> Matrix {
    let src = m.rows();
    assert!(src >= 1 && dst >= 1);
    if src == dst {
        return m.clone();
    }
    let mut out = Matrix::zeros(dst, m.cols());
    for (t, (lo, hi, frac)) in taps(src, dst).enumerate() {
        let (a, b) = (m.row(lo), m.row(hi));
        for (o, (x, y)) in out.row_mut(t).iter_mut().zip(a.iter().zip(b)) {
            *o = (1.0 - frac) * x + frac * y;
        }
    }
    out
}
