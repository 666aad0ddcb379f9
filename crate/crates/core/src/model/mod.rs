//! The tokenizer networks: a frame-level predictor of unit logits, a residual
//! encoder producing one global embedding per utterance, and a decoder that
//! reconstructs input features from (unit one-hot, global embedding) pairs.

mod gumbel;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Params, Reduction, Tape, Var};
use crate::error::{NastError, Result};
use crate::featureio::FeatureSequence;
use crate::tensor::Matrix;
use crate::tokenize::UnitSequence;

pub use gumbel::{
    gumbel, gumbel_noise, gumbel_sample, gumbel_softmax_on_tape, gumbel_softmax_with_noise,
    hard_one_hot,
};
use layers::Init;

/// Architecture and objective hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NastConfig {
    /// Number of discrete units `k`.
    pub num_units: usize,
    pub input_dim: usize,
    pub global_dim: usize,
    pub decoder_out_dim: usize,
    pub decoder_hidden_dim: usize,
    pub predictor_blocks: usize,
    pub attention_heads: usize,
    pub conv_kernel: usize,
    pub ffn_dim: usize,
    /// Width of the per-frame block inside the residual encoder.
    pub encoder_ffn_dim: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_decay_steps: u64,
    /// Weight of the diversity term.
    pub lambda1: f64,
    /// Weight of the robustness term.
    pub lambda2: f64,
    /// Straight-through hard one-hots during training instead of soft samples.
    pub hard_sampling: bool,
    /// Robustness loss summed over frames (default) or averaged.
    pub robust_mean: bool,
    pub seed: u64,
}

impl NastConfig {
    /// Defaults for `input_dim`-dimensional features and `num_units` units.
    pub fn new(input_dim: usize, num_units: usize) -> Self {
        NastConfig {
            num_units,
            input_dim,
            global_dim: 256,
            decoder_out_dim: input_dim,
            decoder_hidden_dim: 2 * input_dim,
            predictor_blocks: 2,
            attention_heads: 4,
            conv_kernel: 31,
            ffn_dim: 4 * input_dim,
            encoder_ffn_dim: 4 * input_dim,
            tau_start: 2.0,
            tau_end: 0.5,
            tau_decay_steps: 10_000,
            lambda1: 1.0,
            lambda2: 0.005,
            hard_sampling: false,
            robust_mean: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NastError::InvalidParameter(m));
        if self.num_units < 2 {
            return bad(format!("num_units must be >= 2, got {}", self.num_units));
        }
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("global_dim", self.global_dim),
            ("decoder_out_dim", self.decoder_out_dim),
            ("decoder_hidden_dim", self.decoder_hidden_dim),
            ("attention_heads", self.attention_heads),
            ("conv_kernel", self.conv_kernel),
            ("ffn_dim", self.ffn_dim),
            ("encoder_ffn_dim", self.encoder_ffn_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.input_dim % self.attention_heads != 0 {
            return bad(format!(
                "input_dim {} not divisible by {} attention heads",
                self.input_dim, self.attention_heads
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return bad("conv_kernel must be odd".into());
        }
        if !(self.tau_end > 0.0 && self.tau_end <= self.tau_start && self.tau_start.is_finite()) {
            return bad("need 0 < tau_end <= tau_start".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// Temperature after `step` updates: exponential decay from `tau_start`
    /// to `tau_end` over `tau_decay_steps`, constant afterwards.
    pub fn tau_at(&self, step: u64) -> f64 {
        if self.tau_decay_steps == 0 || self.tau_start == self.tau_end {
            return self.tau_end;
        }
        let rate = (self.tau_start / self.tau_end).ln() / self.tau_decay_steps as f64;
        (self.tau_start * (-(step as f64) * rate).exp()).max(self.tau_end)
    }

    pub fn robust_reduction(&self) -> Reduction {
        if self.robust_mean {
            Reduction::Mean
        } else {
            Reduction::Sum
        }
    }
}

/// Per-frame unit logits, `T x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSequence {
    pub logits: Matrix,
    pub utterance_id: String,
}

/// Rows on the probability simplex (soft) or exact one-hots (hard).
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotSequence {
    pub vectors: Matrix,
    pub hard: bool,
}

impl OneHotSequence {
    /// Exact one-hots of `units` over `k` classes.
    pub fn from_units(units: &[u32], k: usize) -> Self {
        let mut vectors = Matrix::zeros(units.len(), k);
        for (t, &u) in units.iter().enumerate() {
            vectors.set(t, u as usize, 1.0);
        }
        OneHotSequence {
            vectors,
            hard: true,
        }
    }
}

/// Utterance-level embedding `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding {
    pub u: Vec<f64>,
}

/// Parameters plus configuration of the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NastModel {
    config: NastConfig,
    params: Params,
}

fn predictor_block(i: usize) -> String {
    format!("predictor.block{i}")
}

impl NastModel {
    /// Fresh model with fan-in scaled uniform weights drawn from `config.seed`.
    pub fn new(config: NastConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init {
            params: &mut params,
            rng: &mut rng,
        };
        let d = config.input_dim;
        for i in 0..config.predictor_blocks {
            init.conformer_block(&predictor_block(i), d, config.ffn_dim, config.conv_kernel);
        }
        init.linear("predictor.proj", d, config.num_units);
        init.feed_forward("encoder.block", d, config.encoder_ffn_dim);
        init.layer_norm("encoder.norm", d);
        init.linear("encoder.proj", d, config.global_dim);
        init.linear(
            "decoder.hidden",
            config.num_units + config.global_dim,
            config.decoder_hidden_dim,
        );
        init.linear("decoder.out", config.decoder_hidden_dim, config.decoder_out_dim);
        Ok(NastModel { config, params })
    }

    /// Rebuilds a model from stored parameters; names and shapes must match
    /// what `config` implies.
    pub fn from_params(config: NastConfig, params: Params) -> Result<Self> {
        let reference = NastModel::new(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(NastError::ConfigMismatch(format!(
                "config implies {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((rn, rm), (n, m)) in reference.params.iter().zip(params.iter()) {
            if rn != n || rm.shape() != m.shape() {
                return Err(NastError::ConfigMismatch(format!(
                    "parameter {n} {:?} does not match expected {rn} {:?}",
                    m.shape(),
                    rm.shape()
                )));
            }
        }
        Ok(NastModel { config, params })
    }

    pub fn config(&self) -> &NastConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn num_units(&self) -> usize {
        self.config.num_units
    }

    fn check_dim(&self, seq: &FeatureSequence) -> Result<()> {
        if seq.dim() != self.config.input_dim {
            return Err(NastError::dims(
                self.config.input_dim,
                seq.dim(),
                format!("features of {}", seq.utterance_id),
            ));
        }
        Ok(())
    }

    /// Predictor forward pass on the tape: `T x d -> T x k` logits.
    pub fn predictor_on_tape(&self, t: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for i in 0..self.config.predictor_blocks {
            h = layers::conformer_block(t, &predictor_block(i), h, self.config.attention_heads);
        }
        layers::linear(t, "predictor.proj", h)
    }

    /// Per-frame residual-encoder outputs, `T x d_g`. Each row depends on its
    /// own frame only.
    pub fn encoder_frames_on_tape(&self, t: &mut Tape, x: Var) -> Var {
        let f = layers::feed_forward(t, "encoder.block", x);
        let h = t.add(x, f);
        let h = layers::layer_norm(t, "encoder.norm", h);
        layers::linear(t, "encoder.proj", h)
    }

    /// Global embedding on the tape: the temporal mean of per-frame encodings.
    pub fn encode_global_on_tape(&self, t: &mut Tape, x: Var) -> Var {
        let frames = self.encoder_frames_on_tape(t, x);
        t.mean_rows(frames)
    }

    /// Decoder on the tape: `[onehot_t ; u]` per frame to `T x decoder_out_dim`.
    pub fn decoder_on_tape(&self, t: &mut Tape, onehots: Var, u: Var) -> Var {
        let rows = t.value(onehots).rows();
        let ub = t.broadcast_rows(u, rows);
        let input = t.concat_cols(&[onehots, ub]);
        let h = layers::linear(t, "decoder.hidden", input);
        let h = t.swish(h);
        layers::linear(t, "decoder.out", h)
    }

    pub fn predict_logits(&self, seq: &FeatureSequence) -> Result<LogitSequence> {
        self.check_dim(seq)?;
        let mut t = Tape::new(&self.params);
        let x = t.constant(seq.to_matrix());
        let l = self.predictor_on_tape(&mut t, x);
        Ok(LogitSequence {
            logits: t.value(l).clone(),
            utterance_id: seq.utterance_id.clone(),
        })
    }

    pub fn encode_global(&self, seq: &FeatureSequence) -> Result<GlobalEmbedding> {
        self.check_dim(seq)?;
        let mut t = Tape::new(&self.params);
        let x = t.constant(seq.to_matrix());
        let u = self.encode_global_on_tape(&mut t, x);
        Ok(GlobalEmbedding {
            u: t.value(u).row(0).to_vec(),
        })
    }

    pub fn decode(&self, onehots: &OneHotSequence, u: &GlobalEmbedding) -> Result<Matrix> {
        if onehots.vectors.cols() != self.config.num_units {
            return Err(NastError::dims(
                self.config.num_units,
                onehots.vectors.cols(),
                "one-hot width",
            ));
        }
        if u.u.len() != self.config.global_dim {
            return Err(NastError::dims(self.config.global_dim, u.u.len(), "global embedding"));
        }
        let mut t = Tape::new(&self.params);
        let oh = t.constant(onehots.vectors.clone());
        let uv = t.constant(Matrix::row_vector(&u.u));
        let out = self.decoder_on_tape(&mut t, oh, uv);
        Ok(t.value(out).clone())
    }

    /// Noiseless argmax of the predictor logits, lowest index on ties.
    pub fn quantize(&self, seq: &FeatureSequence) -> Result<UnitSequence> {
        let logits = self.predict_logits(seq)?;
        Ok(UnitSequence {
            units: logits
                .logits
                .argmax_rows()
                .into_iter()
                .map(|u| u as u32)
                .collect(),
            utterance_id: seq.utterance_id.clone(),
        })
    }
}
