//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;

use nast_core::augment::Waveform;
use nast_core::featureio::{load_manifest, synthesize_corpus, Manifest, SyntheticSpec};
use nast_core::NastConfig;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Frequency of the largest magnitude bin of a Hann-windowed FFT over the
/// whole signal, and the bin width in Hz.
pub fn peak_frequency(w: &Waveform) -> (f64, f64) {
    let n = w.len();
    let mut buf: Vec<Complex<f64>> = w
        .samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
            Complex::new(x * hann, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (bin, _) = buf[..n / 2]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .unwrap();
    let width = w.sample_rate_hz as f64 / n as f64;
    (bin as f64 * width, width)
}

/// Power of `b - a` in dB below the power of `a`.
pub fn measured_snr_db(clean: &Waveform, mixed: &Waveform) -> f64 {
    let noise: f64 = clean
        .samples
        .iter()
        .zip(&mixed.samples)
        .map(|(c, m)| (m - c).powi(2))
        .sum::<f64>()
        / clean.len() as f64;
    10.0 * (clean.power() / noise).log10()
}

/// A model small enough for finite differences and quick training.
pub fn tiny_config(d: usize, k: usize) -> NastConfig {
    NastConfig {
        global_dim: 4,
        decoder_hidden_dim: 8,
        predictor_blocks: 1,
        attention_heads: 1,
        conv_kernel: 3,
        ffn_dim: 8,
        encoder_ffn_dim: 8,
        ..NastConfig::new(d, k)
    }
}

/// Synthesizes `spec` into `dir` and loads the manifest back.
pub fn corpus(spec: &SyntheticSpec, dir: &Path) -> Manifest {
    let path = synthesize_corpus(spec, dir).unwrap();
    load_manifest(path, true).unwrap()
}

/// Sum of every entry of `v`, as a 1x1 tape variable.
pub fn sum_all(t: &mut nast_core::autodiff::Tape, v: nast_core::autodiff::Var) -> nast_core::autodiff::Var {
    let (r, c) = t.value(v).shape();
    let left = t.constant(nast_core::Matrix::filled(1, r, 1.0));
    let right = t.constant(nast_core::Matrix::filled(c, 1, 1.0));
    let rows = t.matmul(left, v);
    t.matmul(rows, right)
}
