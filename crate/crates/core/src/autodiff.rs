//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a shared [`Params`] store and are referenced, not copied, so a model can be
//! evaluated from many threads at once, each with its own tape.

use std::collections::HashMap;

use crate::tensor::{gemm, Matrix};

const LN_EPS: f64 = 1e-5;
/// Clamp used inside `p ln p` and cross-entropy logarithms.
pub const LOG_EPS: f64 = 1e-8;

/// Named parameter matrices in insertion (canonical) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Zero matrices shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Swish(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    Glu(Var),
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    BroadcastRows(Var),
    StraightThrough(Var),
    L1Mean {
        x: Var,
        target: Matrix,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
        reduction: Reduction,
    },
    Diversity {
        probs: Var,
        mean: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to a leaf or intermediate variable.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: usize) -> Option<&Matrix> {
        self.params[id].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Matrix>> {
        self.params
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A free input that does receive gradient.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a * bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1);
        let mut out = self.value(a).clone();
        let bias = rv.row(0).to_vec();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Swish(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(s);
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Gated linear unit over the two column halves of `a`.
    pub fn glu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let half = av.cols() / 2;
        assert_eq!(half * 2, av.cols(), "glu needs an even width");
        let mut out = Matrix::zeros(av.rows(), half);
        for r in 0..av.rows() {
            let row = av.row(r);
            for c in 0..half {
                out.set(r, c, row[c] * sigmoid(row[half + c]));
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Glu(a), rg)
    }

    /// Per-channel convolution along time with "same" zero padding.
    /// `w` is `K x C` with odd `K`, `b` is `1 x C`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t_len, ch) = xv.shape();
        let k = wv.rows();
        assert_eq!(wv.cols(), ch);
        let pad = (k / 2) as isize;
        let mut out = Matrix::zeros(t_len, ch);
        for t in 0..t_len {
            let orow = out.row_mut(t);
            orow.copy_from_slice(bv.row(0));
            for j in 0..k {
                let src = t as isize + j as isize - pad;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xr = xv.row(src as usize);
                let wr = wv.row(j);
                for c in 0..ch {
                    orow[c] += wr[c] * xr[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::DepthwiseConv { x, w, b }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row count");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Temporal mean, `T x C -> 1 x C`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = Matrix::row_vector(&column_means(self.value(a)));
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1);
        let mut out = Matrix::zeros(rows, av.cols());
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(av.row(0));
        }
        let rg = self.rg(a);
        self.push(out, Op::BroadcastRows(a), rg)
    }

    /// Forward value `hard`, gradient routed unchanged into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Matrix) -> Var {
        assert_eq!(self.value(soft).shape(), hard.shape());
        let rg = self.rg(soft);
        self.push(hard, Op::StraightThrough(soft), rg)
    }

    /// Mean absolute difference over all entries.
    pub fn l1_mean(&mut self, x: Var, target: Matrix) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape());
        let n = xv.len().max(1) as f64;
        let v = xv
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let rg = self.rg(x);
        self.push(Matrix::filled(1, 1, v), Op::L1Mean { x, target }, rg)
    }

    /// Cross-entropy of `softmax(logits)` against hard class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, reduction: Reduction) -> Var {
        let probs = softmax_rows(self.value(logits));
        assert_eq!(probs.rows(), targets.len());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total -= probs.get(r, t).max(LOG_EPS).ln();
        }
        if reduction == Reduction::Mean {
            total /= targets.len().max(1) as f64;
        }
        let rg = self.rg(logits);
        self.push(
            Matrix::filled(1, 1, total),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                reduction,
            },
            rg,
        )
    }

    /// `(1/k) Σ_i p̄_i ln p̄_i` with `p̄` the temporal mean of `probs`.
    pub fn diversity(&mut self, probs: Var) -> Var {
        let pv = self.value(probs);
        let k = pv.cols();
        let mean = column_means(pv);
        let v = mean.iter().map(|&p| p * p.max(LOG_EPS).ln()).sum::<f64>() / k as f64;
        let rg = self.rg(probs);
        self.push(Matrix::filled(1, 1, v), Op::Diversity { probs, mean }, rg)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let shape = self.value(terms[0].0).shape();
        let mut out = Matrix::zeros(shape.0, shape.1);
        for &(v, w) in terms {
            let vv = self.value(v);
            assert_eq!(vv.shape(), shape);
            for (o, x) in out.as_mut_slice().iter_mut().zip(vv.as_slice()) {
                *o += w * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Back-propagates from the scalar `root` (seed gradient 1).
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        let mut pgrads: Vec<Option<Matrix>> = (0..self.params.len()).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Matrix::filled(rv.rows(), rv.cols(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = self.value(Var(i));
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => accumulate(&mut pgrads[*id], g.clone()),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut da = Matrix::zeros(av.rows(), av.cols());
                        gemm(1.0, &g, false, bv, true, 0.0, &mut da);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.rg(*b) {
                        let mut db = Matrix::zeros(bv.rows(), bv.cols());
                        gemm(1.0, av, true, &g, false, 0.0, &mut db);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut da = Matrix::zeros(av.rows(), av.cols());
                        gemm(1.0, &g, false, bv, false, 0.0, &mut da);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.rg(*b) {
                        let mut db = Matrix::zeros(bv.rows(), bv.cols());
                        gemm(1.0, &g, true, av, false, 0.0, &mut db);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        accumulate(&mut grads[row.0], Matrix::row_vector(&column_sums(&g)));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let da = g.zip_map(self.value(*b), |x, y| x * y);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.rg(*b) {
                        let db = g.zip_map(self.value(*a), |x, y| x * y);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads[a.0], g.map(|x| x * s));
                }
                Op::Swish(a) => {
                    let da = g.zip_map(self.value(*a), |gy, x| {
                        let sg = sigmoid(x);
                        gy * (sg + x * sg * (1.0 - sg))
                    });
                    accumulate(&mut grads[a.0], da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gam = self.value(*gamma).row(0);
                    let (rows, cols) = g.shape();
                    if self.rg(*gamma) {
                        let mut dg = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                dg[c] += g.get(r, c) * xhat.get(r, c);
                            }
                        }
                        accumulate(&mut grads[gamma.0], Matrix::row_vector(&dg));
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads[beta.0], Matrix::row_vector(&column_sums(&g)));
                    }
                    if self.rg(*x) {
                        let mut dx = Matrix::zeros(rows, cols);
                        let n = cols as f64;
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..cols {
                                let dh = g.get(r, c) * gam[c];
                                mean_d += dh;
                                mean_dx += dh * xhat.get(r, c);
                            }
                            mean_d /= n;
                            mean_dx /= n;
                            for c in 0..cols {
                                let dh = g.get(r, c) * gam[c];
                                dx.set(r, c, rstd[r] * (dh - mean_d - xhat.get(r, c) * mean_dx));
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let mut da = Matrix::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gy = g.row(r);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for (d, (yy, gg)) in da.row_mut(r).iter_mut().zip(y.iter().zip(gy)) {
                            *d = yy * (gg - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::Glu(a) => {
                    let av = self.value(*a);
                    let half = av.cols() / 2;
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let row = av.row(r);
                        let gr = g.row(r);
                        let dr = da.row_mut(r);
                        for c in 0..half {
                            let s = sigmoid(row[half + c]);
                            dr[c] = gr[c] * s;
                            dr[half + c] = gr[c] * row[c] * s * (1.0 - s);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::DepthwiseConv { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (t_len, ch) = xv.shape();
                    let k = wv.rows();
                    let pad = (k / 2) as isize;
                    let mut dx = Matrix::zeros(t_len, ch);
                    let mut dw = Matrix::zeros(k, ch);
                    for t in 0..t_len {
                        let gr = g.row(t);
                        for j in 0..k {
                            let src = t as isize + j as isize - pad;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..ch {
                                dx.set(src, c, dx.get(src, c) + gr[c] * wv.get(j, c));
                                dw.set(j, c, dw.get(j, c) + gr[c] * xv.get(src, c));
                            }
                        }
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], Matrix::row_vector(&column_sums(&g)));
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads[w.0], dw);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    let len = g.cols();
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols();
                        if self.rg(*p) {
                            let mut dp = Matrix::zeros(g.rows(), pc);
                            for r in 0..g.rows() {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                            }
                            accumulate(&mut grads[p.0], dp);
                        }
                        off += pc;
                    }
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let inv = 1.0 / av.rows() as f64;
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        for (d, gv) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                            *d = gv * inv;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::BroadcastRows(a) => {
                    accumulate(&mut grads[a.0], Matrix::row_vector(&column_sums(&g)));
                }
                Op::StraightThrough(soft) => accumulate(&mut grads[soft.0], g),
                Op::L1Mean { x, target } => {
                    let xv = self.value(*x);
                    let scale = g.get(0, 0) / xv.len().max(1) as f64;
                    let dx = xv.zip_map(target, |a, b| {
                        let d = a - b;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    reduction,
                } => {
                    let mut scale = g.get(0, 0);
                    if *reduction == Reduction::Mean {
                        scale /= targets.len().max(1) as f64;
                    }
                    let mut dl = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, &t) in targets.iter().enumerate() {
                        // the clamp flattens the loss, so no gradient once it binds
                        if probs.get(r, t) <= LOG_EPS {
                            continue;
                        }
                        for c in 0..probs.cols() {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            dl.set(r, c, scale * (probs.get(r, c) - onehot));
                        }
                    }
                    accumulate(&mut grads[logits.0], dl);
                }
                Op::Diversity { probs, mean } => {
                    let pv = self.value(*probs);
                    let (t_len, k) = pv.shape();
                    let scale = g.get(0, 0) / (k as f64 * t_len as f64);
                    let dmean: Vec<f64> = mean
                        .iter()
                        .map(|&p| {
                            if p > LOG_EPS {
                                scale * (p.ln() + 1.0)
                            } else {
                                scale * LOG_EPS.ln()
                            }
                        })
                        .collect();
                    let mut dp = Matrix::zeros(t_len, k);
                    for r in 0..t_len {
                        dp.row_mut(r).copy_from_slice(&dmean);
                    }
                    accumulate(&mut grads[probs.0], dp);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if self.rg(v) {
                            accumulate(&mut grads[v.0], g.map(|x| x * w));
                        }
                    }
                }
            }
        }
        Gradients {
            nodes: grads,
            params: pgrads,
        }
    }
}

pub(crate) fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

pub(crate) fn column_means(m: &Matrix) -> Vec<f64> {
    let mut out = column_sums(m);
    let inv = 1.0 / m.rows().max(1) as f64;
    for x in &mut out {
        *x *= inv;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences.
    fn check_op(x0: Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut t = Tape::new(&params);
            let x = t.constant(x0.clone());
            let y = build(&mut t, x);
            random(t.value(y).rows(), t.value(y).cols(), &mut rng)
        };
        let eval = |xm: &Matrix| {
            let mut t = Tape::new(&params);
            let x = t.constant(xm.clone());
            let y = build(&mut t, x);
            t.value(y)
                .as_slice()
                .iter()
                .zip(probe.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut t = Tape::new(&params);
        let x = t.leaf(x0.clone());
        let y = build(&mut t, x);
        let w = t.constant(probe.clone());
        let prod = t.mul(y, w);
        let ones_r = t.constant(Matrix::filled(1, t.value(prod).rows(), 1.0));
        let colsum = t.matmul(ones_r, prod);
        let ones_c = t.constant(Matrix::filled(t.value(colsum).cols(), 1, 1.0));
        let total = t.matmul(colsum, ones_c);
        let grads = t.backward(total);
        let analytic = grads.wrt(x).unwrap();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x0.clone();
            xm.as_mut_slice()[i] -= h;
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let a = analytic.as_slice()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_and_row_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_op(random(3, 4, &mut rng), |t, x| t.swish(x));
        check_op(random(3, 4, &mut rng), |t, x| t.softmax_rows(x));
        check_op(random(3, 4, &mut rng), |t, x| t.glu(x));
        check_op(random(3, 4, &mut rng), |t, x| t.mean_rows(x));
        check_op(random(3, 4, &mut rng), |t, x| t.slice_cols(x, 1, 2));
        check_op(random(1, 4, &mut rng), |t, x| t.broadcast_rows(x, 3));
        check_op(random(3, 4, &mut rng), |t, x| {
            let y = t.scale(x, 0.3);
            t.concat_cols(&[x, y])
        });
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random(4, 3, &mut rng);
        let b2 = b.clone();
        check_op(random(2, 4, &mut rng), move |t, x| {
            let bv = t.constant(b2.clone());
            t.matmul(x, bv)
        });
        let a = random(5, 4, &mut rng);
        check_op(random(2, 4, &mut rng), move |t, x| {
            let av = t.constant(a.clone());
            let p = t.matmul_nt(x, av);
            let q = t.matmul_nt(av, x);
            let qt = t.matmul(p, q);
            t.scale(qt, 0.1)
        });
        let row = random(1, 3, &mut rng);
        check_op(random(4, 3, &mut rng), move |t, x| {
            let r = t.constant(row.clone());
            t.add_row(x, r)
        });
    }

    #[test]
    fn layer_norm_and_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = random(1, 5, &mut rng);
        let beta = random(1, 5, &mut rng);
        check_op(random(3, 5, &mut rng), move |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            t.layer_norm(x, g, b)
        });
        let w = random(3, 2, &mut rng);
        let bias = random(1, 2, &mut rng);
        check_op(random(6, 2, &mut rng), move |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(bias.clone());
            t.depthwise_conv(x, wv, bv)
        });
    }

    #[test]
    fn conv_weight_gradient() {
        // gradient w.r.t. the kernel rather than the input
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(7, 3, &mut rng);
        let bias = random(1, 3, &mut rng);
        check_op(random(5, 3, &mut rng), move |t, w| {
            let xv = t.constant(x.clone());
            let bv = t.constant(bias.clone());
            t.depthwise_conv(xv, w, bv)
        });
    }

    #[test]
    fn param_gradients_accumulate_over_reuse() {
        let mut params = Params::new();
        let id = params.insert("w", Matrix::from_rows(&[[2.0]]).unwrap());
        let mut t = Tape::new(&params);
        let w1 = t.param(id);
        let w2 = t.param(id);
        let y = t.mul(w1, w2);
        let g = t.backward(y);
        assert_eq!(g.param(id).unwrap().get(0, 0), 4.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let params = Params::new();
        let mut t = Tape::new(&params);
        let c = t.constant(Matrix::filled(1, 1, 3.0));
        let x = t.leaf(Matrix::filled(1, 1, 2.0));
        let y = t.mul(c, x);
        let g = t.backward(y);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().get(0, 0), 3.0);
    }
}
