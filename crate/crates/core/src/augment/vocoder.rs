//! Phase-vocoder time stretching and resampling-based pitch shifting.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::waveform::Waveform;
use crate::error::{NastError, Result};

pub const WINDOW: usize = 1024;
pub const HOP: usize = 256;

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn wrap_phase(x: f64) -> f64 {
    x - 2.0 * PI * ((x + PI) / (2.0 * PI)).floor()
}

/// Synthesis hop used for a given speed factor.
pub fn synthesis_hop(rate: f64) -> usize {
    ((HOP as f64 / rate).round() as usize).max(1)
}

/// Changes duration by the speed factor `rate` while keeping pitch.
///
/// The output has `round(N / rate)` samples. Analysis uses a 1024-sample Hann
/// window with hop 256; synthesis hop is `256 / rate`, and each bin's phase
/// advances by its measured instantaneous frequency.
pub fn time_stretch(w: &Waveform, rate: f64) -> Result<Waveform> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(NastError::InvalidParameter(format!("stretch rate must be > 0, got {rate}")));
    }
    if w.len() < WINDOW {
        return Err(NastError::InvalidParameter(format!(
            "signal of {} samples is shorter than one {WINDOW}-sample window",
            w.len()
        )));
    }
    let n = w.len();
    let target = ((n as f64 / rate).round() as usize).max(1);
    let syn_hop = synthesis_hop(rate);
    let pad = WINDOW / 2;

    let mut padded = vec![0.0; pad];
    padded.extend_from_slice(&w.samples);
    padded.resize(pad + n + WINDOW, 0.0);
    let frames = (padded.len() - WINDOW) / HOP + 1;

    let window = hann(WINDOW);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(WINDOW);
    let inv = planner.plan_fft_inverse(WINDOW);

    let out_len = ((frames - 1) * syn_hop + WINDOW).max(target + pad);
    let mut out = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let bins = WINDOW / 2 + 1;
    let mut prev_phase = vec![0.0; bins];
    let mut acc_phase = vec![0.0; bins];
    let scale = syn_hop as f64 / HOP as f64;
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];

    for f in 0..frames {
        let start = f * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fwd.process(&mut buf);
        for k in 0..bins {
            let phase = buf[k].arg();
            if f == 0 {
                acc_phase[k] = phase;
            } else {
                let expected = 2.0 * PI * k as f64 * HOP as f64 / WINDOW as f64;
                let dev = wrap_phase(phase - prev_phase[k] - expected);
                acc_phase[k] += (expected + dev) * scale;
            }
            prev_phase[k] = phase;
            buf[k] = Complex::from_polar(buf[k].norm(), acc_phase[k]);
        }
        for k in bins..WINDOW {
            buf[k] = buf[WINDOW - k].conj();
        }
        inv.process(&mut buf);
        let off = f * syn_hop;
        for i in 0..WINDOW {
            out[off + i] += buf[i].re / WINDOW as f64 * window[i];
            norm[off + i] += window[i] * window[i];
        }
    }

    let floor = 1e-3 * norm.iter().copied().fold(0.0, f64::max);
    let samples = (0..target)
        .map(|i| {
            let j = i + pad;
            if norm[j] > floor {
                out[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples, w.sample_rate_hz)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling of `samples` to exactly `target` samples
/// (Hann-windowed sinc, cutoff lowered when compressing).
pub fn resample_to_len(samples: &[f64], target: usize) -> Vec<f64> {
    const HALF_WIDTH: f64 = 16.0;
    let src = samples.len();
    if src == target || src == 0 {
        return samples.to_vec();
    }
    let step = src as f64 / target as f64;
    let cutoff = (1.0 / step).min(1.0);
    let reach = HALF_WIDTH / cutoff;
    (0..target)
        .map(|n| {
            let pos = n as f64 * step;
            let lo = ((pos - reach).ceil().max(0.0)) as usize;
            let hi = ((pos + reach).floor() as usize).min(src - 1);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (j, &x) in samples.iter().enumerate().take(hi + 1).skip(lo) {
                let dist = pos - j as f64;
                let win = 0.5 + 0.5 * (PI * dist / reach).cos();
                let k = cutoff * sinc(cutoff * dist) * win;
                acc += x * k;
                wsum += k;
            }
            // renormalize so DC gain stays 1 near the edges
            if wsum.abs() > 1e-12 {
                acc / wsum
            } else {
                0.0
            }
        })
        .collect()
}

/// Shifts pitch by `semitones` and keeps duration: stretch the signal to
/// `2^(semitones/12)` times its length, then resample back to `N` samples.
pub fn pitch_shift(w: &Waveform, semitones: f64) -> Result<Waveform> {
    if !semitones.is_finite() {
        return Err(NastError::InvalidParameter("semitones must be finite".into()));
    }
    let factor = 2f64.powf(semitones / 12.0);
    let stretched = time_stretch(w, 1.0 / factor)?;
    Waveform::new(resample_to_len(&stretched.samples, w.len()), w.sample_rate_hz)
}
