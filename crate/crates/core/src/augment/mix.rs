//! Additive noise at a target SNR and impulse-response reverberation.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::waveform::{mean_power, Waveform};
use crate::error::{NastError, Result};

/// Noise repeated or truncated to exactly `n` samples.
fn fit_noise(noise: &[f64], n: usize) -> Vec<f64> {
    noise.iter().copied().cycle().take(n).collect()
}

/// Gain applied to `noise` so that the mix has the requested SNR.
pub fn noise_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `w + alpha * noise` with `alpha` chosen so that
/// `10 log10(P_w / P_{alpha noise}) = snr_db`, powers being mean squares.
pub fn inject_noise(w: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if !snr_db.is_finite() {
        return Err(NastError::InvalidParameter("snr_db must be finite".into()));
    }
    if w.sample_rate_hz != noise.sample_rate_hz {
        return Err(NastError::InvalidParameter(format!(
            "sample rate mismatch: signal {} Hz, noise {} Hz",
            w.sample_rate_hz, noise.sample_rate_hz
        )));
    }
    let fitted = fit_noise(&noise.samples, w.len());
    let (pw, pn) = (w.power(), mean_power(&fitted));
    if pw == 0.0 {
        return Err(NastError::InvalidParameter("signal is silent".into()));
    }
    if pn == 0.0 {
        return Err(NastError::InvalidParameter("noise is silent".into()));
    }
    let alpha = noise_gain(pw, pn, snr_db);
    let samples = w
        .samples
        .iter()
        .zip(&fitted)
        .map(|(x, n)| x + alpha * n)
        .collect();
    Waveform::new(samples, w.sample_rate_hz)
}

fn convolve_direct(x: &[f64], h: &[f64], n_out: usize) -> Vec<f64> {
    (0..n_out)
        .map(|n| {
            let kmax = n.min(h.len() - 1);
            (0..=kmax).map(|k| h[k] * x[n - k]).sum()
        })
        .collect()
}

fn convolve_fft(x: &[f64], h: &[f64], n_out: usize) -> Vec<f64> {
    let size = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let lift = |v: &[f64]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        b.resize(size, Complex::new(0.0, 0.0));
        b
    };
    let mut a = lift(x);
    let mut b = lift(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a.iter().take(n_out).map(|c| c.re / size as f64).collect()
}

/// Convolves with `rir`, keeps the first `N` samples, and rescales so the
/// output peak matches the input peak.
pub fn apply_reverb(w: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if rir.is_empty() {
        return Err(NastError::Empty("impulse response".into()));
    }
    if w.sample_rate_hz != rir.sample_rate_hz {
        return Err(NastError::InvalidParameter(format!(
            "sample rate mismatch: signal {} Hz, impulse response {} Hz",
            w.sample_rate_hz, rir.sample_rate_hz
        )));
    }
    let n = w.len();
    let mut y = if rir.len() <= 64 {
        convolve_direct(&w.samples, &rir.samples, n)
    } else {
        convolve_fft(&w.samples, &rir.samples, n)
    };
    let peak_out = y.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    if peak_out > 0.0 {
        let g = w.peak() / peak_out;
        y.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(y, w.sample_rate_hz)
}
