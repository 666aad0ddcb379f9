//! Content-preserving signal variations.
//!
//! Waveform-level transforms (phase-vocoder stretch, pitch shift, additive
//! noise, impulse-response reverb) serve real-audio workflows. Feature-level
//! analogs (time warp, Gaussian feature noise) let the whole training loop run
//! on feature corpora with no audio at all.

mod feature;
mod mix;
mod vocoder;
mod waveform;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NastError, Result};
use crate::featureio::FeatureSequence;

pub use feature::{feature_noise, feature_time_warp, MAX_RATE, MIN_RATE};
pub use mix::{apply_reverb, inject_noise, noise_gain};
pub use vocoder::{pitch_shift, resample_to_len, synthesis_hop, time_stretch, HOP, WINDOW};
pub use waveform::{list_wavs, read_wav, write_wav, WavEncoding, Waveform};

pub const DEFAULT_SNR_DB: ParamRange = ParamRange { lo: 5.0, hi: 15.0 };
pub const DEFAULT_PITCH_SEMITONES: f64 = 4.0;

/// Closed interval a parameter is drawn from; `lo == hi` pins it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(NastError::InvalidParameter(format!("bad range [{lo}, {hi}]")));
        }
        Ok(ParamRange { lo, hi })
    }

    pub fn fixed(v: f64) -> Self {
        ParamRange { lo: v, hi: v }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn within(&self, lo: f64, hi: f64) -> bool {
        self.lo >= lo && self.hi <= hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentKind {
    Identity,
    TimeStretch { rate: ParamRange },
    PitchShift { semitones: f64 },
    Noise { snr_db: ParamRange },
    Reverb { rir_path: PathBuf },
    FeatureWarp { rate: ParamRange },
    FeatureNoise { scale: ParamRange },
}

impl AugmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentKind::Identity => "identity",
            AugmentKind::TimeStretch { .. } => "time_stretch",
            AugmentKind::PitchShift { .. } => "pitch_shift",
            AugmentKind::Noise { .. } => "noise",
            AugmentKind::Reverb { .. } => "reverb",
            AugmentKind::FeatureWarp { .. } => "feature_warp",
            AugmentKind::FeatureNoise { .. } => "feature_noise",
        }
    }

    pub fn is_feature_level(&self) -> bool {
        matches!(
            self,
            AugmentKind::Identity | AugmentKind::FeatureWarp { .. } | AugmentKind::FeatureNoise { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    #[serde(flatten)]
    pub kind: AugmentKind,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind, seed: u64) -> Result<Self> {
        let spec = AugmentSpec { kind, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity() -> Self {
        AugmentSpec {
            kind: AugmentKind::Identity,
            seed: 0,
        }
    }

    pub fn time_stretch(lo: f64, hi: f64) -> Result<Self> {
        Self::new(AugmentKind::TimeStretch { rate: ParamRange::new(lo, hi)? }, 0)
    }

    pub fn feature_warp(lo: f64, hi: f64) -> Result<Self> {
        Self::new(AugmentKind::FeatureWarp { rate: ParamRange::new(lo, hi)? }, 0)
    }

    pub fn feature_noise(lo: f64, hi: f64) -> Result<Self> {
        Self::new(AugmentKind::FeatureNoise { scale: ParamRange::new(lo, hi)? }, 0)
    }

    pub fn noise(lo: f64, hi: f64) -> Result<Self> {
        Self::new(AugmentKind::Noise { snr_db: ParamRange::new(lo, hi)? }, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NastError::InvalidParameter(m));
        match &self.kind {
            AugmentKind::TimeStretch { rate } | AugmentKind::FeatureWarp { rate } => {
                if !rate.within(MIN_RATE, MAX_RATE) || rate.lo > rate.hi {
                    return bad(format!(
                        "rate range [{}, {}] must lie within [{MIN_RATE}, {MAX_RATE}]",
                        rate.lo, rate.hi
                    ));
                }
            }
            AugmentKind::Noise { snr_db } => {
                if !(snr_db.lo <= snr_db.hi) {
                    return bad("SNR range needs lo <= hi".into());
                }
            }
            AugmentKind::FeatureNoise { scale } => {
                if !(scale.lo >= 0.0 && scale.lo <= scale.hi) {
                    return bad("feature-noise scale range needs 0 <= lo <= hi".into());
                }
            }
            AugmentKind::PitchShift { semitones } => {
                if !semitones.is_finite() {
                    return bad("semitones must be finite".into());
                }
            }
            AugmentKind::Identity | AugmentKind::Reverb { .. } => {}
        }
        Ok(())
    }

    /// Point value of a pinned range parameter, for reporting.
    pub fn params_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.kind).unwrap_or(serde_json::Value::Null)
    }
}

/// Picks one spec uniformly and draws its range parameters uniformly.
/// The returned spec has every range pinned and a fresh seed.
pub fn sample_augmentation<R: Rng + ?Sized>(specs: &[AugmentSpec], rng: &mut R) -> Result<AugmentSpec> {
    if specs.is_empty() {
        return Err(NastError::Empty("augmentation list".into()));
    }
    let chosen = &specs[rng.random_range(0..specs.len())];
    let kind = match &chosen.kind {
        AugmentKind::TimeStretch { rate } => AugmentKind::TimeStretch {
            rate: ParamRange::fixed(rate.sample(rng)),
        },
        AugmentKind::FeatureWarp { rate } => AugmentKind::FeatureWarp {
            rate: ParamRange::fixed(rate.sample(rng)),
        },
        AugmentKind::Noise { snr_db } => AugmentKind::Noise {
            snr_db: ParamRange::fixed(snr_db.sample(rng)),
        },
        AugmentKind::FeatureNoise { scale } => AugmentKind::FeatureNoise {
            scale: ParamRange::fixed(scale.sample(rng)),
        },
        other => other.clone(),
    };
    Ok(AugmentSpec {
        kind,
        seed: rng.random(),
    })
}

/// Applies a feature-level spec. Range parameters are drawn with the spec's
/// own seed when not pinned.
pub fn apply_to_features(spec: &AugmentSpec, seq: &FeatureSequence) -> Result<FeatureSequence> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    match &spec.kind {
        AugmentKind::Identity => Ok(seq.clone()),
        AugmentKind::FeatureWarp { rate } => feature_time_warp(seq, rate.sample(&mut rng)),
        AugmentKind::FeatureNoise { scale } => {
            let s = scale.sample(&mut rng);
            feature_noise(seq, s, spec.seed)
        }
        other => Err(NastError::InvalidParameter(format!(
            "{} is a waveform augmentation; use precomputed augmented features",
            other.name()
        ))),
    }
}

/// Noise recordings that noise injection draws from.
#[derive(Debug, Clone, Default)]
pub struct NoiseBank {
    pub noises: Vec<Waveform>,
}

impl NoiseBank {
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let noises = list_wavs(dir)?
            .iter()
            .map(read_wav)
            .collect::<Result<Vec<_>>>()?;
        Ok(NoiseBank { noises })
    }
}

/// Applies a waveform-level spec. Noise injection picks a recording from
/// `bank` and a random start offset, both from the spec's seed.
pub fn apply_to_waveform(spec: &AugmentSpec, w: &Waveform, bank: &NoiseBank) -> Result<Waveform> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    match &spec.kind {
        AugmentKind::Identity => Ok(w.clone()),
        AugmentKind::TimeStretch { rate } => time_stretch(w, rate.sample(&mut rng)),
        AugmentKind::PitchShift { semitones } => pitch_shift(w, *semitones),
        AugmentKind::Noise { snr_db } => {
            if bank.noises.is_empty() {
                return Err(NastError::Empty("noise bank".into()));
            }
            let snr = snr_db.sample(&mut rng);
            let noise = &bank.noises[rng.random_range(0..bank.noises.len())];
            let start = rng.random_range(0..noise.len());
            let rotated: Vec<f64> = noise.samples[start..]
                .iter()
                .chain(&noise.samples[..start])
                .copied()
                .collect();
            inject_noise(w, &Waveform::new(rotated, noise.sample_rate_hz)?, snr)
        }
        AugmentKind::Reverb { rir_path } => apply_reverb(w, &read_wav(rir_path)?),
        other => Err(NastError::InvalidParameter(format!(
            "{} is a feature-level augmentation",
            other.name()
        ))),
    }
}
