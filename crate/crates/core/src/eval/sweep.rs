//! UED as a function of augmentation intensity.

use serde::{Deserialize, Serialize};

use super::ued::ued_corpus;
use crate::augment::{AugmentKind, AugmentSpec, ParamRange};
use crate::error::{NastError, Result};
use crate::featureio::Manifest;
use crate::tokenize::Quantizer;

/// Which augmentation the sweep levels parameterize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Level is the feature-noise scale (relative to the utterance RMS).
    FeatureNoise,
    /// Level is the feature time-warp rate.
    FeatureWarp,
}

impl SweepKind {
    pub fn spec_at(&self, level: f64) -> Result<AugmentSpec> {
        let kind = match self {
            SweepKind::FeatureNoise => AugmentKind::FeatureNoise {
                scale: ParamRange::fixed(level),
            },
            SweepKind::FeatureWarp => AugmentKind::FeatureWarp {
                rate: ParamRange::fixed(level),
            },
        };
        AugmentSpec::new(kind, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub level: f64,
    pub mean_ued: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub kind: SweepKind,
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,mean_ued\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.level, p.mean_ued));
        }
        out
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean_ued).collect()
    }
}

/// Mean UED at each level; every level reuses the same seed so the curves
/// differ only in intensity.
pub fn noise_sweep<Q: Quantizer + ?Sized>(
    quantizer: &Q,
    manifest: &Manifest,
    kind: SweepKind,
    levels: &[f64],
    seed: u64,
) -> Result<SweepCurve> {
    if levels.is_empty() {
        return Err(NastError::Empty("sweep levels".into()));
    }
    let points = levels
        .iter()
        .map(|&level| {
            let report = ued_corpus(quantizer, manifest, &kind.spec_at(level)?, seed)?;
            Ok(SweepPoint {
                level,
                mean_ued: report.mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepCurve { kind, points })
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}
