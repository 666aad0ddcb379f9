//! Unit-usage statistics and unit/phoneme agreement.

use serde::{Deserialize, Serialize};

use crate::error::{NastError, Result};
use crate::featureio::Manifest;
use crate::tokenize::UnitSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub counts: Vec<u64>,
    /// Entropy of the usage distribution in nats.
    pub entropy: f64,
    /// `entropy / ln k`, in `[0, 1]`.
    pub normalized_entropy: f64,
}

fn entropy_of_counts(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn usage_from_counts(counts: Vec<u64>) -> Result<UsageStats> {
    let k = counts.len();
    if k < 2 {
        return Err(NastError::InvalidParameter(format!("usage statistics need k >= 2, got {k}")));
    }
    let entropy = entropy_of_counts(&counts);
    Ok(UsageStats {
        counts,
        entropy,
        normalized_entropy: (entropy / (k as f64).ln()).clamp(0.0, 1.0),
    })
}

/// Histogram of raw units over `k` classes and its normalized entropy.
pub fn unit_usage_stats(seqs: &[UnitSequence], k: usize) -> Result<UsageStats> {
    let mut counts = vec![0u64; k];
    for s in seqs {
        for &u in &s.units {
            let slot = counts.get_mut(u as usize).ok_or_else(|| NastError::Validation {
                utterance: s.utterance_id.clone(),
                message: format!("unit {u} is out of range for k = {k}"),
            })?;
            *slot += 1;
        }
    }
    usage_from_counts(counts)
}

/// Normalized mutual information (arithmetic-mean normalization) between
/// two labelings of the same items.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NastError::dims(a.len(), b.len(), "labelings for NMI"));
    }
    if a.is_empty() {
        return Err(NastError::Empty("NMI of empty labelings".into()));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
    }
    Ok(nmi_from_joint(&joint, ka, kb))
}

fn nmi_from_joint(joint: &[u64], ka: usize, kb: usize) -> f64 {
    let n: u64 = joint.iter().sum();
    let row: Vec<u64> = (0..ka).map(|i| joint[i * kb..(i + 1) * kb].iter().sum()).collect();
    let col: Vec<u64> = (0..kb).map(|j| (0..ka).map(|i| joint[i * kb + j]).sum()).collect();
    let ha = entropy_of_counts(&row);
    let hb = entropy_of_counts(&col);
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = joint[i * kb + j];
            if c > 0 {
                let c = c as f64;
                mi += c / nf * (c * nf / (row[i] as f64 * col[j] as f64)).ln();
            }
        }
    }
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    pub nmi: f64,
    /// Frame accuracy after mapping each unit to its majority phoneme.
    pub frame_accuracy_best_map: f64,
    /// `k x P` counts, unit-major.
    pub confusion: Vec<Vec<u64>>,
}

/// Agreement between frame units and the manifest's phoneme labels. Unit
/// sequences are matched to records by utterance id.
pub fn phoneme_purity(units: &[UnitSequence], manifest: &Manifest, k: usize) -> Result<PurityReport> {
    let by_id: std::collections::HashMap<&str, &UnitSequence> =
        units.iter().map(|s| (s.utterance_id.as_str(), s)).collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for rec in &manifest.records {
        let labels = rec.phoneme_labels.as_ref().ok_or_else(|| NastError::Validation {
            utterance: rec.utterance_id.clone(),
            message: "no phoneme labels".into(),
        })?;
        let z = by_id.get(rec.utterance_id.as_str()).ok_or_else(|| NastError::Validation {
            utterance: rec.utterance_id.clone(),
            message: "missing from the unit file".into(),
        })?;
        if z.len() != labels.len() {
            return Err(NastError::Validation {
                utterance: rec.utterance_id.clone(),
                message: format!("{} units but {} phoneme labels", z.len(), labels.len()),
            });
        }
        for (&u, &p) in z.units.iter().zip(labels) {
            if u as usize >= k {
                return Err(NastError::Validation {
                    utterance: rec.utterance_id.clone(),
                    message: format!("unit {u} is out of range for k = {k}"),
                });
            }
            pairs.push((u as usize, p as usize));
        }
    }
    if pairs.is_empty() {
        return Err(NastError::Empty("no labeled frames".into()));
    }
    let num_phonemes = pairs.iter().map(|p| p.1).max().unwrap() + 1;
    let mut joint = vec![0u64; k * num_phonemes];
    for &(u, p) in &pairs {
        joint[u * num_phonemes + p] += 1;
    }
    let confusion: Vec<Vec<u64>> = joint.chunks(num_phonemes).map(<[u64]>::to_vec).collect();
    let correct: u64 = confusion.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    Ok(PurityReport {
        nmi: nmi_from_joint(&joint, k, num_phonemes),
        frame_accuracy_best_map: correct as f64 / pairs.len() as f64,
        confusion,
    })
}
