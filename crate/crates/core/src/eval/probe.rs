//! Speaker probing: how much speaker identity a fixed utterance-level
//! representation carries, measured by a held-out linear classifier.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_in_place;
use crate::error::{NastError, Result};
use crate::tensor::argmax;
use crate::tokenize::UnitSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Normalized histogram of the utterance's frame units.
    Local,
    /// The residual encoder's utterance embedding.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub representation: Representation,
    pub accuracy: f64,
    pub num_speakers: usize,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub test_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            test_fraction: 0.2,
            epochs: 300,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Mean-pooled one-hot histogram of `z` over `k` units.
pub fn local_representation(z: &UnitSequence, k: usize) -> Vec<f64> {
    let mut h = vec![0.0; k];
    for &u in &z.units {
        if let Some(slot) = h.get_mut(u as usize) {
            *slot += 1.0;
        }
    }
    let n = z.len().max(1) as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// Per-class shuffle, then the first `round(fraction * n)` items of each
/// class go to the test split. Every class must appear in both splits.
fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let n_test = (fraction * idx.len() as f64).round() as usize;
        if n_test == 0 || n_test == idx.len() {
            return Err(NastError::InvalidParameter(format!(
                "stratification failed: speaker class {class} has {} utterance(s), cannot appear in both splits",
                idx.len()
            )));
        }
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Multinomial logistic regression trained by full-batch gradient descent on
/// standardized inputs. Returns held-out accuracy.
fn fit_and_score(x: &[Vec<f64>], y: &[usize], classes: usize, train: &[usize], test: &[usize], cfg: &ProbeConfig) -> f64 {
    let d = x[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(&x[i]) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for &i in train {
        for j in 0..d {
            std[j] += (x[i][j] - mean[j]).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let z = |i: usize| -> Vec<f64> { (0..d).map(|j| (x[i][j] - mean[j]) / std[j]).collect() };
    let train_x: Vec<Vec<f64>> = train.iter().map(|&i| z(i)).collect();

    let mut w = vec![vec![0.0; d]; classes];
    let mut b = vec![0.0; classes];
    let logits = |w: &[Vec<f64>], b: &[f64], v: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| b[c] + w[c].iter().zip(v).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    };
    for _ in 0..cfg.epochs {
        let mut gw = vec![vec![0.0; d]; classes];
        let mut gb = vec![0.0; classes];
        for (v, &i) in train_x.iter().zip(train) {
            let mut p = logits(&w, &b, v);
            softmax_in_place(&mut p);
            p[y[i]] -= 1.0;
            for c in 0..classes {
                gb[c] += p[c] / n;
                for j in 0..d {
                    gw[c][j] += p[c] * v[j] / n;
                }
            }
        }
        for c in 0..classes {
            b[c] -= cfg.learning_rate * gb[c];
            for j in 0..d {
                w[c][j] -= cfg.learning_rate * (gw[c][j] + cfg.l2 * w[c][j]);
            }
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| argmax(&logits(&w, &b, &z(i))) == y[i])
        .count();
    correct as f64 / test.len() as f64
}

/// Trains a linear speaker classifier on 80% of the utterances (stratified
/// by speaker) and reports accuracy on the rest.
pub fn speaker_probe(
    representation: Representation,
    reps: &[Vec<f64>],
    speakers: &[String],
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if reps.len() != speakers.len() {
        return Err(NastError::dims(reps.len(), speakers.len(), "representations vs speaker ids"));
    }
    if reps.is_empty() {
        return Err(NastError::Empty("speaker probe input".into()));
    }
    let d = reps[0].len();
    if d == 0 || reps.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(NastError::InvalidParameter(
            "representations must share one non-zero width and be finite".into(),
        ));
    }
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for s in speakers {
        let next = ids.len();
        ids.entry(s.as_str()).or_insert(next);
    }
    let labels: Vec<usize> = speakers.iter().map(|s| ids[s.as_str()]).collect();
    let num_speakers = ids.len();
    if num_speakers == 1 {
        log::warn!("speaker probe with a single speaker is degenerate; reporting accuracy 1.0");
        let n_test = (cfg.test_fraction * reps.len() as f64).round() as usize;
        return Ok(ProbeReport {
            representation,
            accuracy: 1.0,
            num_speakers,
            train_size: reps.len() - n_test,
            test_size: n_test,
        });
    }
    let (train, test) = stratified_split(&labels, cfg.test_fraction, seed)?;
    let accuracy = fit_and_score(reps, &labels, num_speakers, &train, &test, cfg);
    Ok(ProbeReport {
        representation,
        accuracy,
        num_speakers,
        train_size: train.len(),
        test_size: test.len(),
    })
}
