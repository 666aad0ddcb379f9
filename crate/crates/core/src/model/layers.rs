//! Building blocks evaluated on a [`Tape`]: linear maps, feed-forward
//! modules, multi-head self-attention and the Conformer block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Params, Tape, Var};
use crate::tensor::Matrix;

/// Registers parameters under a dotted prefix.
pub(crate) struct Init<'a> {
    pub params: &'a mut Params,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// `in x out` weight with fan-in scaled uniform entries, zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.params.insert(
            format!("{name}.weight"),
            Matrix::from_vec(fan_in, fan_out, data).unwrap(),
        );
        self.params
            .insert(format!("{name}.bias"), Matrix::zeros(1, fan_out));
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.params
            .insert(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0));
        self.params
            .insert(format!("{name}.beta"), Matrix::zeros(1, dim));
    }

    pub fn depthwise(&mut self, name: &str, kernel: usize, channels: usize) {
        let bound = 1.0 / (kernel as f64).sqrt();
        let data = (0..kernel * channels)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.params.insert(
            format!("{name}.weight"),
            Matrix::from_vec(kernel, channels, data).unwrap(),
        );
        self.params
            .insert(format!("{name}.bias"), Matrix::zeros(1, channels));
    }

    pub fn feed_forward(&mut self, name: &str, dim: usize, hidden: usize) {
        self.layer_norm(&format!("{name}.norm"), dim);
        self.linear(&format!("{name}.in"), dim, hidden);
        self.linear(&format!("{name}.out"), hidden, dim);
    }

    pub fn conformer_block(&mut self, name: &str, dim: usize, ffn: usize, kernel: usize) {
        self.feed_forward(&format!("{name}.ffn1"), dim, ffn);
        self.layer_norm(&format!("{name}.attn.norm"), dim);
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.attn.{proj}"), dim, dim);
        }
        self.layer_norm(&format!("{name}.conv.norm"), dim);
        self.linear(&format!("{name}.conv.pw1"), dim, 2 * dim);
        self.depthwise(&format!("{name}.conv.dw"), kernel, dim);
        self.layer_norm(&format!("{name}.conv.dw_norm"), dim);
        self.linear(&format!("{name}.conv.pw2"), dim, dim);
        self.feed_forward(&format!("{name}.ffn2"), dim, ffn);
        self.layer_norm(&format!("{name}.final_norm"), dim);
    }
}

pub(crate) fn linear(t: &mut Tape, name: &str, x: Var) -> Var {
    let w = t.param_by_name(&format!("{name}.weight"));
    let b = t.param_by_name(&format!("{name}.bias"));
    let y = t.matmul(x, w);
    t.add_row(y, b)
}

pub(crate) fn layer_norm(t: &mut Tape, name: &str, x: Var) -> Var {
    let g = t.param_by_name(&format!("{name}.gamma"));
    let b = t.param_by_name(&format!("{name}.beta"));
    t.layer_norm(x, g, b)
}

/// `LN -> Linear -> Swish -> Linear`, without the residual.
pub(crate) fn feed_forward(t: &mut Tape, name: &str, x: Var) -> Var {
    let h = layer_norm(t, &format!("{name}.norm"), x);
    let h = linear(t, &format!("{name}.in"), h);
    let h = t.swish(h);
    linear(t, &format!("{name}.out"), h)
}

fn self_attention(t: &mut Tape, name: &str, x: Var, heads: usize) -> Var {
    let dim = t.value(x).cols();
    let head_dim = dim / heads;
    let q = linear(t, &format!("{name}.q"), x);
    let k = linear(t, &format!("{name}.k"), x);
    let v = linear(t, &format!("{name}.v"), x);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * head_dim, head_dim);
        let kh = t.slice_cols(k, h * head_dim, head_dim);
        let vh = t.slice_cols(v, h * head_dim, head_dim);
        let scores = t.matmul_nt(qh, kh);
        let scores = t.scale(scores, scale);
        let attn = t.softmax_rows(scores);
        outs.push(t.matmul(attn, vh));
    }
    let merged = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
    linear(t, &format!("{name}.o"), merged)
}

fn conv_module(t: &mut Tape, name: &str, x: Var) -> Var {
    let h = layer_norm(t, &format!("{name}.norm"), x);
    let h = linear(t, &format!("{name}.pw1"), h);
    let h = t.glu(h);
    let w = t.param_by_name(&format!("{name}.dw.weight"));
    let b = t.param_by_name(&format!("{name}.dw.bias"));
    let h = t.depthwise_conv(h, w, b);
    let h = layer_norm(t, &format!("{name}.dw_norm"), h);
    let h = t.swish(h);
    linear(t, &format!("{name}.pw2"), h)
}

/// Macaron Conformer block: half-step FFN, self-attention, convolution,
/// half-step FFN, final layer norm; every sub-module is residual.
pub(crate) fn conformer_block(t: &mut Tape, name: &str, x: Var, heads: usize) -> Var {
    let f1 = feed_forward(t, &format!("{name}.ffn1"), x);
    let x = t.weighted_sum(&[(x, 1.0), (f1, 0.5)]);
    let a_in = layer_norm(t, &format!("{name}.attn.norm"), x);
    let a = self_attention(t, &format!("{name}.attn"), a_in, heads);
    let x = t.add(x, a);
    let c = conv_module(t, &format!("{name}.conv"), x);
    let x = t.add(x, c);
    let f2 = feed_forward(t, &format!("{name}.ffn2"), x);
    let x = t.weighted_sum(&[(x, 1.0), (f2, 0.5)]);
    layer_norm(t, &format!("{name}.final_norm"), x)
}
