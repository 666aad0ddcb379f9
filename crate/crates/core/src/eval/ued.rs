//! Levenshtein distance and the unit edit distance between clean and
//! augmented tokenizations.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_to_features, sample_augmentation, AugmentSpec};
use crate::error::{NastError, Result};
use crate::featureio::Manifest;
use crate::par::{self, Mode};
use crate::tokenize::{dedup, Quantizer, UnitSequence};

const STACK_ROW: usize = 64;

/// Edit distance where every edit operation costs 1.
pub fn levenshtein(a: &[u32], b: &[u32]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    if short.len() < STACK_ROW {
        let mut row = [0usize; STACK_ROW];
        dp_row(long, short, &mut row[..short.len() + 1])
    } else {
        let mut row = vec![0usize; short.len() + 1];
        dp_row(long, short, &mut row)
    }
}

fn dp_row(a: &[u32], b: &[u32], row: &mut [usize]) -> usize {
    for (j, r) in row.iter_mut().enumerate() {
        *r = j;
    }
    for (i, &x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for j in 1..row.len() {
            let up = row[j];
            let sub = diag + usize::from(x != b[j - 1]);
            row[j] = sub.min(up + 1).min(row[j - 1] + 1);
            diag = up;
        }
    }
    row[row.len() - 1]
}

/// Edit operations between de-duplicated sequences and the de-duplicated
/// clean length they are normalized by.
fn ued_parts(clean: &UnitSequence, aug: &UnitSequence) -> (usize, usize) {
    let c = dedup(clean);
    let a = dedup(aug);
    (levenshtein(&c.units, &a.units), c.len())
}

/// `100 * lev(dedup(clean), dedup(aug)) / max(1, |dedup(clean)|)`.
pub fn unit_edit_distance(clean: &UnitSequence, aug: &UnitSequence) -> f64 {
    let (ops, len) = ued_parts(clean, aug);
    100.0 * ops as f64 / len.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UedEntry {
    pub utterance_id: String,
    pub ued_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UedReport {
    pub augmentation: String,
    pub per_utterance: Vec<UedEntry>,
    /// Arithmetic mean of the per-utterance values.
    pub mean: f64,
    /// Edit operations pooled over the corpus, divided by the pooled
    /// de-duplicated clean length.
    pub pooled: f64,
}

impl UedReport {
    pub fn table(&self) -> String {
        let width = self
            .per_utterance
            .iter()
            .map(|e| e.utterance_id.len())
            .max()
            .unwrap_or(0)
            .max("utterance".len());
        let mut out = format!("{:<width$}  {:>10}\n", "utterance", "ued_%");
        for e in &self.per_utterance {
            out.push_str(&format!("{:<width$}  {:>10.3}\n", e.utterance_id, e.ued_percent));
        }
        out.push_str(&format!("{:<width$}  {:>10.3}\n", "mean", self.mean));
        out.push_str(&format!("{:<width$}  {:>10.3}\n", "pooled", self.pooled));
        out
    }
}

/// UED over already-paired unit sequences.
pub fn ued_from_pairs(augmentation: &str, pairs: &[(UnitSequence, UnitSequence)]) -> Result<UedReport> {
    if pairs.is_empty() {
        return Err(NastError::Empty("no utterance pairs for UED".into()));
    }
    let mut per_utterance = Vec::with_capacity(pairs.len());
    let (mut ops, mut len) = (0usize, 0usize);
    for (c, a) in pairs {
        let (o, l) = ued_parts(c, a);
        ops += o;
        len += l;
        per_utterance.push(UedEntry {
            utterance_id: c.utterance_id.clone(),
            ued_percent: 100.0 * o as f64 / l.max(1) as f64,
        });
    }
    let mean = per_utterance.iter().map(|e| e.ued_percent).sum::<f64>() / pairs.len() as f64;
    Ok(UedReport {
        augmentation: augmentation.to_string(),
        per_utterance,
        mean,
        pooled: 100.0 * ops as f64 / len.max(1) as f64,
    })
}

/// Pairs two unit files by utterance id, in the order of `clean`.
pub fn ued_from_unit_files(clean: &[UnitSequence], aug: &[UnitSequence]) -> Result<UedReport> {
    let by_id: HashMap<&str, &UnitSequence> = aug.iter().map(|s| (s.utterance_id.as_str(), s)).collect();
    let pairs = clean
        .iter()
        .map(|c| {
            by_id
                .get(c.utterance_id.as_str())
                .map(|a| (c.clone(), (*a).clone()))
                .ok_or_else(|| {
                    NastError::Validation {
                        utterance: c.utterance_id.clone(),
                        message: "missing from the augmented unit file".into(),
                    }
                })
        })
        .collect::<Result<Vec<_>>>()?;
    ued_from_pairs("precomputed", &pairs)
}

/// Per-utterance augmentation drawn from `(seed, utterance index)`, so the
/// result does not depend on evaluation order.
pub fn augmentation_for(spec: &AugmentSpec, seed: u64, index: usize) -> Result<AugmentSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    sample_augmentation(std::slice::from_ref(spec), &mut rng)
}

/// Tokenizes every utterance clean and augmented and reports UED.
pub fn ued_corpus<Q: Quantizer + ?Sized>(
    quantizer: &Q,
    manifest: &Manifest,
    spec: &AugmentSpec,
    seed: u64,
) -> Result<UedReport> {
    spec.validate()?;
    let indexed: Vec<usize> = (0..manifest.len()).collect();
    let pairs = par::try_map(Mode::default(), &indexed, |&i| {
        let rec = &manifest.records[i];
        let clean = manifest.load_features(rec)?;
        let aug = apply_to_features(&augmentation_for(spec, seed, i)?, &clean)?;
        Ok::<_, NastError>((quantizer.quantize_sequence(&clean)?, quantizer.quantize_sequence(&aug)?))
    })?;
    ued_from_pairs(spec.kind.name(), &pairs)
}
