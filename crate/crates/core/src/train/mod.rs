//! Joint optimization of predictor, residual encoder and decoder on paired
//! clean/augmented utterances.

mod checkpoint;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_to_features, sample_augmentation, AugmentSpec};
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{NastError, Result};
use crate::featureio::{FeatureSequence, Manifest};
use crate::losses::{robustness_on_tape, total_loss, LossBreakdown};
use crate::model::{gumbel_noise, gumbel_softmax_on_tape, NastConfig, NastModel};
use crate::par::{self, Mode};
use crate::tensor::Matrix;

pub use checkpoint::{
    checkpoint_path, load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

/// Settings of the optimizer and the batching loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub augment_specs: Vec<AugmentSpec>,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            max_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            augment_specs: vec![AugmentSpec::identity()],
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NastError::InvalidParameter(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip >= 0.0) {
            return bad("adam_eps must be > 0 and grad_clip >= 0");
        }
        if self.augment_specs.is_empty() {
            return bad("augment_specs must not be empty (use identity)");
        }
        for s in &self.augment_specs {
            s.validate()?;
            if !s.kind.is_feature_level() {
                return bad("training augmentations must be feature-level (identity, feature_warp, feature_noise)");
            }
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: NastModel,
    /// Adam first moments, one per parameter tensor.
    pub m: Vec<Matrix>,
    /// Adam second moments.
    pub v: Vec<Matrix>,
    /// Number of completed updates.
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Temperature the next step will use, `tau_at(step)`.
    pub tau: f64,
}

impl TrainState {
    pub fn new(model: NastModel, seed: u64) -> Self {
        let m = model.params().zeros_like();
        let v = model.params().zeros_like();
        let tau = model.config().tau_at(0);
        TrainState {
            model,
            m,
            v,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tau,
        }
    }
}

/// Scalar nodes of one utterance's objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub recon: Var,
    pub robust: Var,
    pub diversity: Var,
}

/// Records the composite objective of one clean/augmented pair on `t`, with
/// explicit Gumbel noise for the clean branch.
pub fn objective_on_tape(
    t: &mut Tape,
    model: &NastModel,
    clean: &Matrix,
    augmented: &Matrix,
    noise: Matrix,
    tau: f64,
) -> ObjectiveVars {
    let cfg = model.config();
    let x = t.constant(clean.clone());
    let logits = model.predictor_on_tape(t, x);
    let (sample, _) = gumbel_softmax_on_tape(t, logits, noise, tau, cfg.hard_sampling);
    let u = model.encode_global_on_tape(t, x);
    let decoded = model.decoder_on_tape(t, sample, u);
    let recon = t.l1_mean(decoded, clean.clone());
    let diversity = t.diversity(sample);
    let targets = t.value(sample).argmax_rows();
    let xa = t.constant(augmented.clone());
    let aug_logits = model.predictor_on_tape(t, xa);
    let robust = robustness_on_tape(t, &targets, aug_logits, cfg.robust_reduction());
    let total = t.weighted_sum(&[(recon, 1.0), (diversity, cfg.lambda1), (robust, cfg.lambda2)]);
    ObjectiveVars {
        total,
        recon,
        robust,
        diversity,
    }
}

/// Loss breakdown plus parameter gradients of one utterance.
pub fn utterance_gradients(
    model: &NastModel,
    clean: &Matrix,
    augmented: &Matrix,
    noise: Matrix,
    tau: f64,
) -> (LossBreakdown, Gradients) {
    let mut t = Tape::new(model.params());
    let o = objective_on_tape(&mut t, model, clean, augmented, noise, tau);
    let cfg = model.config();
    let (recon, robust, diversity) = (t.scalar(o.recon), t.scalar(o.robust), t.scalar(o.diversity));
    let breakdown = LossBreakdown {
        recon,
        robust,
        diversity,
        total: t.scalar(o.total),
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    };
    (breakdown, t.backward(o.total))
}

/// One optimizer update on `batch` (clean sequences). Each utterance gets
/// one sampled augmentation and fresh Gumbel noise, both drawn from the
/// state's generator in batch order. Gradients are averaged over the batch.
pub fn train_step(
    state: &mut TrainState,
    batch: &[FeatureSequence],
    config: &TrainConfig,
    mode: Mode,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(NastError::Empty("training batch".into()));
    }
    let mcfg = state.model.config().clone();
    let k = mcfg.num_units;
    let tau = mcfg.tau_at(state.step);
    let mut jobs = Vec::with_capacity(batch.len());
    for seq in batch {
        if seq.dim() != mcfg.input_dim {
            return Err(NastError::dims(
                mcfg.input_dim,
                seq.dim(),
                format!("features of {}", seq.utterance_id),
            ));
        }
        let spec = sample_augmentation(&config.augment_specs, &mut state.rng)?;
        let noise_seed: u64 = state.rng.random();
        jobs.push((seq, spec, noise_seed));
    }
    let model = &state.model;
    let results = par::try_map(mode, &jobs, |(seq, spec, noise_seed)| {
        let aug = apply_to_features(spec, seq)?;
        let noise = gumbel_noise(seq.num_frames(), k, &mut ChaCha8Rng::seed_from_u64(*noise_seed));
        Ok::<_, NastError>(utterance_gradients(model, &seq.to_matrix(), &aug.to_matrix(), noise, tau))
    })?;

    let n = batch.len() as f64;
    let mut grads = model.params().zeros_like();
    let (mut recon, mut robust, mut diversity) = (0.0, 0.0, 0.0);
    for (b, g) in results {
        recon += b.recon / n;
        robust += b.robust / n;
        diversity += b.diversity / n;
        for (acc, gi) in grads.iter_mut().zip(g.into_params()) {
            if let Some(gi) = gi {
                acc.add_assign(&gi);
            }
        }
    }
    for (term, v) in [("recon", recon), ("robust", robust), ("diversity", diversity)] {
        if !v.is_finite() {
            return Err(NastError::NonFiniteLoss { step: state.step, term });
        }
    }
    let breakdown = total_loss(recon, diversity, robust, mcfg.lambda1, mcfg.lambda2)?;

    grads.iter_mut().for_each(|g| g.scale_assign(1.0 / n));
    let norm = grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(NastError::NonFiniteLoss {
            step: state.step,
            term: "gradient",
        });
    }
    if config.grad_clip > 0.0 && norm > config.grad_clip {
        let s = config.grad_clip / norm;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    adam_update(state, &grads, config);
    state.step += 1;
    state.tau = mcfg.tau_at(state.step);
    Ok(breakdown)
}

fn adam_update(state: &mut TrainState, grads: &[Matrix], cfg: &TrainConfig) {
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let params = state.model.params_mut();
    for (i, g) in grads.iter().enumerate() {
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        let p = params.get_mut(i).as_mut_slice();
        for j in 0..p.len() {
            let gj = g.as_slice()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

/// Corpus indices of the batch used at `step`. Utterances are consumed in a
/// per-epoch permutation derived from `(seed, epoch)`, so any step's batch
/// can be recomputed without loader state.
pub fn batch_indices(corpus_len: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let start = step as usize * batch_size;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (start..start + batch_size)
        .map(|pos| {
            let epoch = pos / corpus_len;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, epoch_permutation(corpus_len, seed, epoch as u64)));
            }
            cached.as_ref().unwrap().1[pos % corpus_len]
        })
        .collect()
}

fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub recon: f64,
    pub robust: f64,
    pub diversity: f64,
    pub total: f64,
    pub tau: f64,
}

pub const LOG_FILE: &str = "train_log.jsonl";

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogEntry>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| NastError::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| NastError::io(path, e))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}

/// Where a training run left its artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub history: Vec<LogEntry>,
}

/// Trains from scratch, or from `resume` when given, until
/// `config.max_steps` updates have been applied.
pub fn train_loop(
    model_config: &NastConfig,
    config: &TrainConfig,
    manifest: &Manifest,
    out_dir: impl AsRef<Path>,
    resume: Option<&Path>,
    mode: Mode,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if model_config.decoder_out_dim != model_config.input_dim {
        return Err(NastError::ConfigMismatch(
            "decoder_out_dim must equal input_dim for reconstruction".into(),
        ));
    }
    if manifest.is_empty() {
        return Err(NastError::Empty("training corpus".into()));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| NastError::io(out_dir, e))?;
    let corpus = manifest.load_all()?;
    for seq in &corpus {
        if seq.dim() != model_config.input_dim {
            return Err(NastError::dims(
                model_config.input_dim,
                seq.dim(),
                format!("features of {}", seq.utterance_id),
            ));
        }
    }

    let mut state = match resume {
        Some(p) => load_checkpoint_for(p, model_config)?,
        None => TrainState::new(NastModel::new(model_config.clone())?, config.seed),
    };

    let log_path = out_dir.join(LOG_FILE);
    let mut history: Vec<LogEntry> = if resume.is_some() && log_path.exists() {
        read_log(&log_path)?
            .into_iter()
            .filter(|e| e.step < state.step)
            .collect()
    } else {
        Vec::new()
    };
    let file = File::create(&log_path).map_err(|e| NastError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let write_entry = |log: &mut BufWriter<File>, e: &LogEntry| -> Result<()> {
        writeln!(log, "{}", serde_json::to_string(e)?).map_err(|err| NastError::io(&log_path, err))
    };
    for e in &history {
        write_entry(&mut log, e)?;
    }

    let mut last_ckpt = None;
    if config.max_steps == 0 || state.step >= config.max_steps {
        let p = checkpoint_path(out_dir, state.step);
        save_checkpoint(&state, Some(config), &p)?;
        last_ckpt = Some(p);
    }
    while state.step < config.max_steps {
        let step = state.step;
        let batch: Vec<FeatureSequence> = batch_indices(corpus.len(), config.batch_size, config.seed, step)
            .into_iter()
            .map(|i| corpus[i].clone())
            .collect();
        let b = train_step(&mut state, &batch, config, mode)?;
        let entry = LogEntry {
            step,
            recon: b.recon,
            robust: b.robust,
            diversity: b.diversity,
            total: b.total,
            tau: model_config.tau_at(step),
        };
        write_entry(&mut log, &entry)?;
        if step % 100 == 0 {
            log::info!(
                "step {step}: total {:.5} recon {:.5} robust {:.5} diversity {:.5} tau {:.4}",
                b.total,
                b.recon,
                b.robust,
                b.diversity,
                entry.tau
            );
        }
        history.push(entry);
        let done = state.step == config.max_steps;
        if done || (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0) {
            let p = checkpoint_path(out_dir, state.step);
            save_checkpoint(&state, Some(config), &p)?;
            last_ckpt = Some(p);
        }
    }
    log.flush().map_err(|e| NastError::io(&log_path, e))?;
    Ok(TrainOutcome {
        final_checkpoint: last_ckpt.expect("a checkpoint is always written"),
        log_path,
        history,
    })
}
