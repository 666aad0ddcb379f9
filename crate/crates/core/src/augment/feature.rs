//! Feature-level stand-ins for waveform augmentation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NastError, Result};
use crate::featureio::FeatureSequence;
use crate::interp::resample_rows;

pub const MIN_RATE: f64 = 0.8;
pub const MAX_RATE: f64 = 1.2;

/// Resamples frames along time to `round(T / rate)` rows by linear interpolation.
///
/// Any positive rate is accepted here; augmentation specs restrict sampled
/// rates to `[MIN_RATE, MAX_RATE]`.
pub fn feature_time_warp(seq: &FeatureSequence, rate: f64) -> Result<FeatureSequence> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(NastError::InvalidParameter(format!("warp rate must be > 0, got {rate}")));
    }
    if rate == 1.0 {
        return Ok(seq.clone());
    }
    let t = seq.num_frames();
    if t < 2 {
        return Err(NastError::InvalidParameter(
            "time warp needs at least 2 frames".into(),
        ));
    }
    let target = ((t as f64 / rate).round() as usize).max(1);
    let mut out = FeatureSequence::from_matrix(
        seq.utterance_id.clone(),
        &resample_rows(&seq.to_matrix(), target),
    )?;
    out.frame_rate_hz = seq.frame_rate_hz;
    Ok(out)
}

/// Adds i.i.d. Gaussian noise with standard deviation `scale * rms(frames)`.
pub fn feature_noise(seq: &FeatureSequence, scale: f64, seed: u64) -> Result<FeatureSequence> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(NastError::InvalidParameter(format!(
            "noise scale must be >= 0, got {scale}"
        )));
    }
    if scale == 0.0 {
        return Ok(seq.clone());
    }
    let std = scale * seq.rms();
    let normal = Normal::new(0.0, std).map_err(|e| NastError::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = seq
        .data()
        .iter()
        .map(|&x| (f64::from(x) + normal.sample(&mut rng)) as f32)
        .collect();
    let mut out = FeatureSequence::new(seq.utterance_id.clone(), seq.num_frames(), seq.dim(), data)?;
    out.frame_rate_hz = seq.frame_rate_hz;
    Ok(out)
}
