//! Tape-based reverse-mode autodiff sized for this pipeline's three networks.
//!
//! A `Tape` records each op as it executes (define-by-run). `Var` handles are
//! plain indices into the tape. Gradient flow is tracked per node: constants
//! and stop-gradient branches never allocate or receive gradient buffers, so
//! the frozen-encoder and twin-branch forward passes cost nothing extra on
//! the backward sweep.

mod check;
mod optim;
mod tensor;

pub use check::gradient_check;
pub use optim::{adamw_step, sgd_momentum_step, OptimState, ParamSet};
pub use tensor::Tensor;

use crate::error::{CdError, CdResult};
use crate::scalar::Scalar;
use rayon::prelude::*;
use std::cell::RefCell;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    StopGrad,
    Relu,
    Abs,
    Neg,
    Add,
    Sub,
    Square,
    Sum,
    Mean,
    Conv2d { stride: usize, pad: usize },
    AvgPool2,
    UpsampleBilinear2x,
    ConcatChannels,
    GlobalAvgPool,
    RepeatRows { m: usize },
    L2NormalizeRows,
    L2NormalizeChannels,
    CosineRows,
    BceWithLogits,
}

struct Node<S: Scalar> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Per-variable gradients produced by [`Tape::backward`].
///
/// Only leaf variables retain gradients; intermediate buffers are freed as
/// the sweep consumes them.
pub struct Gradients<S: Scalar> {
    g: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.g.get(v.0).and_then(|o| o.as_deref())
    }
}

/// Recording of a single forward computation.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(shape: &[usize]) -> CdResult<(usize, usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(CdError::ShapeMismatch(format!(
            "expected NCHW tensor, got shape {other:?}"
        ))),
    }
}

/// Rows/cols view: a bare vector counts as a single row.
fn dims2(shape: &[usize]) -> CdResult<(usize, usize)> {
    match shape {
        [d] => Ok((1, *d)),
        [n, d] => Ok((*n, *d)),
        other => Err(CdError::ShapeMismatch(format!(
            "expected vector or matrix, got shape {other:?}"
        ))),
    }
}

/// (index0, index1, fraction) lookup for one axis of a 2x bilinear upsample.
/// Output coordinate o samples source (o + 0.5)/2 - 0.5, clamped to the axis.
fn upsample_axis(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, op: Op, inputs: Vec<Var>, value: Tensor<S>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn any_needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Registers an input. `needs_grad` marks trainable parameters.
    pub fn leaf(&self, value: Tensor<S>, needs_grad: bool) -> Var {
        self.push(Op::Leaf, vec![], value, needs_grad)
    }

    /// Registers a non-trainable input.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Zero-copy read of a node's value.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn unary(&self, op: Op, x: Var, f: impl Fn(S) -> S) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.0].value.map(&f)
        };
        let ng = self.any_needs_grad(&[x]);
        self.push(op, vec![x], value, ng)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(Op::Relu, x, |v| v.max(S::zero()))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(Op::Abs, x, |v| v.abs())
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(Op::Neg, x, |v| -v)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(Op::Square, x, |v| v * v)
    }

    /// Identity in the forward pass; blocks gradient flow in the backward.
    pub fn stop_grad(&self, x: Var) -> Var {
        let value = self.value(x);
        self.push(Op::StopGrad, vec![x], value, false)
    }

    fn binary_elementwise(&self, op: Op, a: Var, b: Var, f: impl Fn(S, S) -> S) -> CdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(CdError::ShapeMismatch(format!(
                    "elementwise op on shapes {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::raw(ta.shape().to_vec(), data)
        };
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(op, vec![a, b], value, ng))
    }

    pub fn add(&self, a: Var, b: Var) -> CdResult<Var> {
        self.binary_elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> CdResult<Var> {
        self.binary_elementwise(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            // f64 accumulator: keeps reductions over large buffers stable
            // even for f32 tensors
            let s: f64 = nodes[x.0].value.data().iter().map(|v| v.to64()).sum();
            Tensor::scalar(S::from64(s))
        };
        let ng = self.any_needs_grad(&[x]);
        self.push(Op::Sum, vec![x], value, ng)
    }

    pub fn mean(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let s: f64 = t.data().iter().map(|v| v.to64()).sum();
            Tensor::scalar(S::from64(s / t.numel() as f64))
        };
        let ng = self.any_needs_grad(&[x]);
        self.push(Op::Mean, vec![x], value, ng)
    }

    /// 2-D cross-correlation over NCHW input with an OIkk kernel.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> CdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let inp = &nodes[input.0].value;
            let wgt = &nodes[weight.0].value;
            let b = &nodes[bias.0].value;
            conv2d_forward(inp, wgt, b, stride, pad)?
        };
        let ng = self.any_needs_grad(&[input, weight, bias]);
        Ok(self.push(
            Op::Conv2d { stride, pad },
            vec![input, weight, bias],
            value,
            ng,
        ))
    }

    /// 2x2 stride-2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&self, x: Var) -> CdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (n, c, h, w) = dims4(t.shape())?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(CdError::ShapeMismatch(format!(
                    "avg_pool2 needs even spatial dims, got {h}x{w}"
                )));
            }
            let (ho, wo) = (h / 2, w / 2);
            let quarter = S::from64(0.25);
            let src = t.data();
            let mut out = vec![S::zero(); n * c * ho * wo];
            out.par_chunks_mut(ho * wo).enumerate().for_each(|(p, plane)| {
                let sp = &src[p * h * w..][..h * w];
                for y in 0..ho {
                    for xo in 0..wo {
                        let i = 2 * y * w + 2 * xo;
                        plane[y * wo + xo] =
                            (sp[i] + sp[i + 1] + sp[i + w] + sp[i + w + 1]) * quarter;
                    }
                }
            });
            Tensor::raw(vec![n, c, ho, wo], out)
        };
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::AvgPool2, vec![x], value, ng))
    }

    /// Doubles both spatial dims with bilinear interpolation.
    pub fn upsample_bilinear2x(&self, x: Var) -> CdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (n, c, h, w) = dims4(t.shape())?;
            let ys = upsample_axis(h);
            let xs = upsample_axis(w);
            let src = t.data();
            let mut out = vec![S::zero(); n * c * 4 * h * w];
            out.par_chunks_mut(4 * h * w).enumerate().for_each(|(p, plane)| {
                let sp = &src[p * h * w..][..h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    let (wy0, wy1) = (S::from64(1.0 - fy), S::from64(fy));
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let (wx0, wx1) = (S::from64(1.0 - fx), S::from64(fx));
                        let top = sp[y0 * w + x0] * wx0 + sp[y0 * w + x1] * wx1;
                        let bot = sp[y1 * w + x0] * wx0 + sp[y1 * w + x1] * wx1;
                        plane[oy * 2 * w + ox] = top * wy0 + bot * wy1;
                    }
                }
            });
            Tensor::raw(vec![n, c, 2 * h, 2 * w], out)
        };
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::UpsampleBilinear2x, vec![x], value, ng))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&self, xs: &[Var]) -> CdResult<Var> {
        if xs.is_empty() {
            return Err(CdError::ShapeMismatch("concat of zero tensors".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (n0, _, h0, w0) = dims4(nodes[xs[0].0].value.shape())?;
            let mut c_total = 0;
            for v in xs {
                let (n, c, h, w) = dims4(nodes[v.0].value.shape())?;
                if (n, h, w) != (n0, h0, w0) {
                    return Err(CdError::ShapeMismatch(format!(
                        "concat_channels on {:?} vs {:?}",
                        nodes[xs[0].0].value.shape(),
                        nodes[v.0].value.shape()
                    )));
                }
                c_total += c;
            }
            let mut out = Vec::with_capacity(n0 * c_total * h0 * w0);
            for nn in 0..n0 {
                for v in xs {
                    let t = &nodes[v.0].value;
                    let c = t.shape()[1];
                    let plane = h0 * w0;
                    out.extend_from_slice(&t.data()[nn * c * plane..(nn + 1) * c * plane]);
                }
            }
            Tensor::raw(vec![n0, c_total, h0, w0], out)
        };
        let ng = self.any_needs_grad(xs);
        Ok(self.push(Op::ConcatChannels, xs.to_vec(), value, ng))
    }

    /// Mean over spatial dims: NCHW -> NC.
    pub fn global_avg_pool(&self, x: Var) -> CdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (n, c, h, w) = dims4(t.shape())?;
            let inv = 1.0 / (h * w) as f64;
            let data = t
                .data()
                .chunks_exact(h * w)
                .map(|plane| S::from64(plane.iter().map(|v| v.to64()).sum::<f64>() * inv))
                .collect();
            Tensor::raw(vec![n, c], data)
        };
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::GlobalAvgPool, vec![x], value, ng))
    }

    /// Tiles a matrix vertically `m` times: `[N, D] -> [m·N, D]` with
    /// copy `k` occupying rows `[k·N, (k+1)·N)`.
    pub fn repeat_rows(&self, x: Var, m: usize) -> CdResult<Var> {
        if m == 0 {
            return Err(CdError::InvalidConfig(
                "repeat_rows requires m >= 1".into(),
            ));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (n, d) = dims2(t.shape())?;
            let mut data = Vec::with_capacity(m * n * d);
            for _ in 0..m {
                data.extend_from_slice(t.data());
            }
            Tensor::raw(vec![m * n, d], data)
        };
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::RepeatRows { m }, vec![x], value, ng))
    }

    /// Scales each row of a matrix (or a bare vector) to unit L2 norm,
    /// with an epsilon of 1e-8 added to the denominator.
    pub fn l2_normalize_rows(&self, x: Var) -> CdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (_, d) = dims2(t.shape())?;
            let mut data = Vec::with_capacity(t.numel());
            for row in t.data().chunks_exact(d) {
                let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt() + S::norm_eps();
                data.extend(row.iter().map(|&v| v / norm));
            }
            Tensor::raw(t.shape().to_vec(), data)
        };
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::L2NormalizeRows, vec![x], value, ng))
    }

    /// Scales each per-pixel channel vector of an NCHW map to unit L2 norm.
    pub fn l2_normalize_channels(&self, x: Var) -> CdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (n, c, h, w) = dims4(t.shape())?;
            let plane = h * w;
            let src = t.data();
            let mut out = vec![S::zero(); src.len()];
            for nn in 0..n {
                let base = nn * c * plane;
                for p in 0..plane {
                    let mut sq = S::zero();
                    for ch in 0..c {
                        let v = src[base + ch * plane + p];
                        sq += v * v;
                    }
                    let norm = sq.sqrt() + S::norm_eps();
                    for ch in 0..c {
                        out[base + ch * plane + p] = src[base + ch * plane + p] / norm;
                    }
                }
            }
            Tensor::raw(t.shape().to_vec(), out)
        };
        let ng = self.any_needs_grad(&[x]);
        Ok(self.push(Op::L2NormalizeChannels, vec![x], value, ng))
    }

    /// Row-wise cosine similarity of two equally shaped matrices -> [N].
    /// Epsilon 1e-8 in the denominator guards zero vectors.
    pub fn cosine_rows(&self, a: Var, b: Var) -> CdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (n, d) = dims2(ta.shape())?;
            let (nb, db) = dims2(tb.shape())?;
            if (n, d) != (nb, db) {
                return Err(CdError::ShapeMismatch(format!(
                    "cosine on shapes {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            if d == 0 {
                return Err(CdError::ShapeMismatch("cosine of empty vectors".into()));
            }
            let mut out = Vec::with_capacity(n);
            for (ra, rb) in ta.data().chunks_exact(d).zip(tb.data().chunks_exact(d)) {
                let s: S = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                let na = ra.iter().map(|&v| v * v).sum::<S>().sqrt();
                let nb = rb.iter().map(|&v| v * v).sum::<S>().sqrt();
                out.push(s / (na * nb + S::norm_eps()));
            }
            Tensor::raw(vec![n], out)
        };
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(Op::CosineRows, vec![a, b], value, ng))
    }

    /// Cosine similarity of two vectors as a scalar node.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> CdResult<Var> {
        {
            let nodes = self.nodes.borrow();
            let (n, _) = dims2(nodes[a.0].value.shape())?;
            if n != 1 {
                return Err(CdError::ShapeMismatch(format!(
                    "cosine_similarity expects single vectors, got {n} rows"
                )));
            }
        }
        self.cosine_rows(a, b)
    }

    /// Twin-branch pretext loss: mean over rows of
    /// `-cos(z_top_i, stopgrad(z_bottom_i))`. Gradient reaches only `z_top`.
    pub fn pretext_similarity_loss(&self, z_top: Var, z_bottom: Var) -> CdResult<Var> {
        let frozen = self.stop_grad(z_bottom);
        let cos = self.cosine_rows(z_top, frozen)?;
        let m = self.mean(cos);
        Ok(self.neg(m))
    }

    /// Mean binary cross-entropy on raw logits, in the overflow-safe form
    /// `max(x,0) - x t + ln(1 + exp(-|x|))`. Targets must be exactly 0 or 1.
    pub fn bce_with_logits(&self, logits: Var, target: Var) -> CdResult<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (lt, tt) = (&nodes[logits.0].value, &nodes[target.0].value);
            if lt.shape() != tt.shape() {
                return Err(CdError::ShapeMismatch(format!(
                    "bce on logits {:?} vs target {:?}",
                    lt.shape(),
                    tt.shape()
                )));
            }
            let mut acc = 0.0f64;
            for (&x, &t) in lt.data().iter().zip(tt.data()) {
                if t != S::zero() && t != S::one() {
                    return Err(CdError::InvalidTarget(format!(
                        "bce target {t} is not 0 or 1"
                    )));
                }
                acc += (x.max(S::zero()) - x * t + (-x.abs()).exp().ln_1p()).to64();
            }
            Tensor::scalar(S::from64(acc / lt.numel() as f64))
        };
        let ng = self.any_needs_grad(&[logits]);
        Ok(self.push(Op::BceWithLogits, vec![logits, target], value, ng))
    }

    /// Reverse sweep from a scalar node. Returns gradients for leaf
    /// variables that were registered with `needs_grad = true`.
    pub fn backward(&self, root: Var) -> CdResult<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(CdError::ShapeMismatch(format!(
                "backward from non-scalar shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut g: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.0].needs_grad {
            return Ok(Gradients { g });
        }
        g[root.0] = Some(vec![S::one()]);
        for idx in (0..=root.0).rev() {
            if !nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = g[idx].take() else { continue };
            let node = &nodes[idx];
            match node.op {
                Op::Leaf => {
                    // keep for the caller
                    g[idx] = Some(gout);
                    continue;
                }
                Op::StopGrad => unreachable!("stop_grad nodes never need gradients"),
                Op::Relu => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        let xv = nodes[x.0].value.data();
                        for i in 0..buf.len() {
                            if xv[i] > S::zero() {
                                buf[i] += gout[i];
                            }
                        }
                    }
                }
                Op::Abs => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        let xv = nodes[x.0].value.data();
                        for i in 0..buf.len() {
                            // subgradient 0 at the kink
                            if xv[i] > S::zero() {
                                buf[i] += gout[i];
                            } else if xv[i] < S::zero() {
                                buf[i] -= gout[i];
                            }
                        }
                    }
                }
                Op::Neg => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        for i in 0..buf.len() {
                            buf[i] -= gout[i];
                        }
                    }
                }
                Op::Add => {
                    for &x in &node.inputs {
                        if let Some(buf) = entry(&mut g, &nodes, x) {
                            for i in 0..buf.len() {
                                buf[i] += gout[i];
                            }
                        }
                    }
                }
                Op::Sub => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    if let Some(buf) = entry(&mut g, &nodes, a) {
                        for i in 0..buf.len() {
                            buf[i] += gout[i];
                        }
                    }
                    if let Some(buf) = entry(&mut g, &nodes, b) {
                        for i in 0..buf.len() {
                            buf[i] -= gout[i];
                        }
                    }
                }
                Op::Square => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        let xv = nodes[x.0].value.data();
                        let two = S::from64(2.0);
                        for i in 0..buf.len() {
                            buf[i] += two * xv[i] * gout[i];
                        }
                    }
                }
                Op::Sum => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        for v in buf.iter_mut() {
                            *v += gout[0];
                        }
                    }
                }
                Op::Mean => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        let s = gout[0] / S::from64(buf.len() as f64);
                        for v in buf.iter_mut() {
                            *v += s;
                        }
                    }
                }
                Op::Conv2d { stride, pad } => {
                    conv2d_backward(&mut g, &nodes, node, &gout, stride, pad);
                }
                Op::AvgPool2 => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        let (_, _, h, w) = dims4(nodes[x.0].value.shape()).expect("checked");
                        let (ho, wo) = (h / 2, w / 2);
                        let quarter = S::from64(0.25);
                        buf.par_chunks_mut(h * w).zip(gout.par_chunks(ho * wo)).for_each(
                            |(plane, gp)| {
                                for y in 0..ho {
                                    for xo in 0..wo {
                                        let gv = gp[y * wo + xo] * quarter;
                                        let i = 2 * y * w + 2 * xo;
                                        plane[i] += gv;
                                        plane[i + 1] += gv;
                                        plane[i + w] += gv;
                                        plane[i + w + 1] += gv;
                                    }
                                }
                            },
                        );
                    }
                }
                Op::UpsampleBilinear2x => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        let (_, _, h, w) = dims4(nodes[x.0].value.shape()).expect("checked");
                        let ys = upsample_axis(h);
                        let xs = upsample_axis(w);
                        buf.par_chunks_mut(h * w)
                            .zip(gout.par_chunks(4 * h * w))
                            .for_each(|(plane, gp)| {
                                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                                    let (wy0, wy1) = (S::from64(1.0 - fy), S::from64(fy));
                                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                        let gv = gp[oy * 2 * w + ox];
                                        let (wx0, wx1) =
                                            (S::from64(1.0 - fx), S::from64(fx));
                                        plane[y0 * w + x0] += gv * wy0 * wx0;
                                        plane[y0 * w + x1] += gv * wy0 * wx1;
                                        plane[y1 * w + x0] += gv * wy1 * wx0;
                                        plane[y1 * w + x1] += gv * wy1 * wx1;
                                    }
                                }
                            });
                    }
                }
                Op::ConcatChannels => {
                    let (n0, _, h0, w0) =
                        dims4(node.value.shape()).expect("checked at construction");
                    let plane = h0 * w0;
                    let c_total = node.value.shape()[1];
                    let mut c_off = 0;
                    for &x in &node.inputs {
                        let c = nodes[x.0].value.shape()[1];
                        if let Some(buf) = entry(&mut g, &nodes, x) {
                            for nn in 0..n0 {
                                let src =
                                    &gout[(nn * c_total + c_off) * plane..][..c * plane];
                                let dst = &mut buf[nn * c * plane..][..c * plane];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        c_off += c;
                    }
                }
                Op::GlobalAvgPool => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        let (_, _, h, w) = dims4(nodes[x.0].value.shape()).expect("checked");
                        let inv = S::from64(1.0 / (h * w) as f64);
                        for (plane, &gv) in buf.chunks_exact_mut(h * w).zip(gout.iter()) {
                            let s = gv * inv;
                            for v in plane.iter_mut() {
                                *v += s;
                            }
                        }
                    }
                }
                Op::RepeatRows { m } => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        let block = buf.len();
                        for k in 0..m {
                            for (v, &gv) in
                                buf.iter_mut().zip(gout[k * block..(k + 1) * block].iter())
                            {
                                *v += gv;
                            }
                        }
                    }
                }
                Op::L2NormalizeRows => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        let t = &nodes[x.0].value;
                        let (_, d) = dims2(t.shape()).expect("checked");
                        for ((row, grow), brow) in t
                            .data()
                            .chunks_exact(d)
                            .zip(gout.chunks_exact(d))
                            .zip(buf.chunks_exact_mut(d))
                        {
                            l2_normalize_vec_backward(row, grow, brow, 1);
                        }
                    }
                }
                Op::L2NormalizeChannels => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        let t = &nodes[x.0].value;
                        let (n, c, h, w) = dims4(t.shape()).expect("checked");
                        let plane = h * w;
                        let src = t.data();
                        for nn in 0..n {
                            let base = nn * c * plane;
                            for p in 0..plane {
                                let off = base + p;
                                l2_normalize_vec_backward(
                                    &src[off..off + (c - 1) * plane + 1],
                                    &gout[off..off + (c - 1) * plane + 1],
                                    &mut buf[off..off + (c - 1) * plane + 1],
                                    plane,
                                );
                            }
                        }
                    }
                }
                Op::CosineRows => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (_, d) = dims2(nodes[a.0].value.shape()).expect("checked");
                    for (side, other) in [(a, b), (b, a)] {
                        if let Some(buf) = entry(&mut g, &nodes, side) {
                            let xs = nodes[side.0].value.data();
                            let ys = nodes[other.0].value.data();
                            for (r, &gv) in gout.iter().enumerate() {
                                let xr = &xs[r * d..(r + 1) * d];
                                let yr = &ys[r * d..(r + 1) * d];
                                let brow = &mut buf[r * d..(r + 1) * d];
                                cosine_vec_backward(xr, yr, gv, brow);
                            }
                        }
                    }
                }
                Op::BceWithLogits => {
                    let x = node.inputs[0];
                    if let Some(buf) = entry(&mut g, &nodes, x) {
                        let xv = nodes[x.0].value.data();
                        let tv = nodes[node.inputs[1].0].value.data();
                        let scale = gout[0] / S::from64(buf.len() as f64);
                        for i in 0..buf.len() {
                            buf[i] += scale * (stable_sigmoid(xv[i]) - tv[i]);
                        }
                    }
                }
            }
        }
        Ok(Gradients { g })
    }
}

/// Gradient buffer for `v`, lazily zero-initialized; `None` when the node
/// does not participate in gradient flow.
fn entry<'a, S: Scalar>(
    g: &'a mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    v: Var,
) -> Option<&'a mut Vec<S>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let slot = &mut g[v.0];
    if slot.is_none() {
        *slot = Some(vec![S::zero(); nodes[v.0].value.numel()]);
    }
    slot.as_mut()
}

/// Backward of `y = x / (|x| + eps)` for one vector, reading the vector at
/// the given element stride (1 for rows, plane size for channel vectors).
fn l2_normalize_vec_backward<S: Scalar>(x: &[S], gy: &[S], gx: &mut [S], stride: usize) {
    let n = (x.len() - 1) / stride + 1;
    let mut sq = S::zero();
    let mut dot = S::zero();
    for i in 0..n {
        let v = x[i * stride];
        sq += v * v;
        dot += v * gy[i * stride];
    }
    let r = sq.sqrt();
    let denom = r + S::norm_eps();
    for i in 0..n {
        let mut d = gy[i * stride] / denom;
        if r > S::zero() {
            d -= dot * x[i * stride] / (denom * denom * r);
        }
        gx[i * stride] += d;
    }
}

/// Backward of `c = x.y / (|x||y| + eps)` with respect to `x`.
fn cosine_vec_backward<S: Scalar>(x: &[S], y: &[S], gc: S, gx: &mut [S]) {
    let s: S = x.iter().zip(y).map(|(&a, &b)| a * b).sum();
    let nx = x.iter().map(|&v| v * v).sum::<S>().sqrt();
    let ny = y.iter().map(|&v| v * v).sum::<S>().sqrt();
    let q = nx * ny + S::norm_eps();
    for i in 0..x.len() {
        let mut d = y[i] / q;
        if nx > S::zero() {
            d -= s * x[i] * ny / (q * q * nx);
        }
        gx[i] += gc * d;
    }
}

fn conv2d_forward<S: Scalar>(
    inp: &Tensor<S>,
    wgt: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> CdResult<Tensor<S>> {
    let (n, ic, h, w) = dims4(inp.shape())?;
    let (oc, wic, k, k2) = dims4(wgt.shape())?;
    if wic != ic || k != k2 {
        return Err(CdError::ShapeMismatch(format!(
            "conv kernel {:?} incompatible with input {:?}",
            wgt.shape(),
            inp.shape()
        )));
    }
    if bias.shape() != [oc] {
        return Err(CdError::ShapeMismatch(format!(
            "conv bias shape {:?}, expected [{oc}]",
            bias.shape()
        )));
    }
    if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(CdError::ShapeMismatch(format!(
            "kernel {k} with pad {pad}, stride {stride} does not fit {h}x{w}"
        )));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let src = inp.data();
    let wv = wgt.data();
    let bv = bias.data();
    let mut out = vec![S::zero(); n * oc * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(idx, plane)| {
        let nn = idx / oc;
        let oo = idx % oc;
        plane.fill(bv[oo]);
        for ci in 0..ic {
            let in_plane = &src[(nn * ic + ci) * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wgt_v = wv[((oo * ic + ci) * k + ky) * k + kx];
                    if stride == 1 {
                        // row saxpy: out[y][x0..x1] += w * in[y+ky-pad][x0+kx-pad ..]
                        let x0 = pad.saturating_sub(kx);
                        let x1 = (w + pad - kx).min(wo);
                        if x0 >= x1 {
                            continue;
                        }
                        let len = x1 - x0;
                        let shift = x0 + kx - pad;
                        for oy in 0..ho {
                            let iy = oy as isize + ky as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * w + shift..][..len];
                            let out_row = &mut plane[oy * wo + x0..][..len];
                            for (o, &i) in out_row.iter_mut().zip(in_row) {
                                *o += wgt_v * i;
                            }
                        }
                    } else {
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * w..][..w];
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    plane[oy * wo + ox] += wgt_v * in_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::raw(vec![n, oc, ho, wo], out))
}

fn conv2d_backward<S: Scalar>(
    g: &mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    node: &Node<S>,
    gout: &[S],
    stride: usize,
    pad: usize,
) {
    let (input, weight, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
    let (n, ic, h, w) = dims4(nodes[input.0].value.shape()).expect("checked");
    let (oc, _, k, _) = dims4(nodes[weight.0].value.shape()).expect("checked");
    let (ho, wo) = {
        let s = node.value.shape();
        (s[2], s[3])
    };
    let src = nodes[input.0].value.data();
    let wv = nodes[weight.0].value.data();

    if let Some(buf) = entry(g, nodes, bias) {
        for oo in 0..oc {
            let mut acc = S::zero();
            for nn in 0..n {
                let plane = &gout[(nn * oc + oo) * ho * wo..][..ho * wo];
                acc += plane.iter().copied().sum::<S>();
            }
            buf[oo] += acc;
        }
    }

    if let Some(buf) = entry(g, nodes, weight) {
        buf.par_chunks_mut(ic * k * k).enumerate().for_each(|(oo, wchunk)| {
            for nn in 0..n {
                let go_plane = &gout[(nn * oc + oo) * ho * wo..][..ho * wo];
                for ci in 0..ic {
                    let in_plane = &src[(nn * ic + ci) * h * w..][..h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = S::zero();
                            if stride == 1 {
                                let x0 = pad.saturating_sub(kx);
                                let x1 = (w + pad - kx).min(wo);
                                if x0 >= x1 {
                                    continue;
                                }
                                let len = x1 - x0;
                                let shift = x0 + kx - pad;
                                for oy in 0..ho {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let in_row = &in_plane[iy as usize * w + shift..][..len];
                                    let go_row = &go_plane[oy * wo + x0..][..len];
                                    acc += in_row
                                        .iter()
                                        .zip(go_row)
                                        .map(|(&a, &b)| a * b)
                                        .sum::<S>();
                                }
                            } else {
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix >= 0 && ix < w as isize {
                                            acc += in_plane[iy as usize * w + ix as usize]
                                                * go_plane[oy * wo + ox];
                                        }
                                    }
                                }
                            }
                            wchunk[(ci * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        });
    }

    if let Some(buf) = entry(g, nodes, input) {
        buf.par_chunks_mut(h * w).enumerate().for_each(|(idx, dplane)| {
            let nn = idx / ic;
            let ci = idx % ic;
            for oo in 0..oc {
                let go_plane = &gout[(nn * oc + oo) * ho * wo..][..ho * wo];
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt_v = wv[((oo * ic + ci) * k + ky) * k + kx];
                        if stride == 1 {
                            let x0 = pad.saturating_sub(kx);
                            let x1 = (w + pad - kx).min(wo);
                            if x0 >= x1 {
                                continue;
                            }
                            let len = x1 - x0;
                            let shift = x0 + kx - pad;
                            for oy in 0..ho {
                                let iy = oy as isize + ky as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let d_row = &mut dplane[iy as usize * w + shift..][..len];
                                let go_row = &go_plane[oy * wo + x0..][..len];
                                for (d, &gv) in d_row.iter_mut().zip(go_row) {
                                    *d += wgt_v * gv;
                                }
                            }
                        } else {
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dplane[iy as usize * w + ix as usize] +=
                                            wgt_v * go_plane[oy * wo + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Plain 6-loop cross-correlation, the oracle for conv2d.
    fn conv_reference(
        inp: &Tensor<f32>,
        wgt: &Tensor<f32>,
        bias: &Tensor<f32>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f32> {
        let (n, ic, h, w) = (
            inp.shape()[0],
            inp.shape()[1],
            inp.shape()[2],
            inp.shape()[3],
        );
        let (oc, k) = (wgt.shape()[0], wgt.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0f32; n * oc * ho * wo];
        for nn in 0..n {
            for oo in 0..oc {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.data()[oo];
                        for ci in 0..ic {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        let iv = inp.data()[((nn * ic + ci) * h
                                            + iy as usize)
                                            * w
                                            + ix as usize];
                                        let wv =
                                            wgt.data()[((oo * ic + ci) * k + ky) * k + kx];
                                        acc += iv * wv;
                                    }
                                }
                            }
                        }
                        out[((nn * oc + oo) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, oc, ho, wo], out).unwrap()
    }

    #[test]
    fn conv_all_ones_sums_the_window() {
        let t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let w = t.constant(Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let b = t.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = t.conv2d(x, w, b, 1, 0).unwrap();
        let out = t.value(y);
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        let t = Tape::<f32>::new();
        let inp = rand_tensor(vec![1, 1, 5, 5], 21);
        let x = t.constant(inp.clone());
        let w = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = t.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = t.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), inp.data());
    }

    #[test]
    fn conv_matches_reference_loops() {
        for (seed, stride, pad) in [(31u64, 1usize, 1usize), (32, 1, 0), (33, 2, 1)] {
            let inp = rand_tensor(vec![1, 2, 5, 5], seed);
            let wgt = rand_tensor(vec![3, 2, 3, 3], seed + 100);
            let bias = rand_tensor(vec![3], seed + 200);
            let t = Tape::<f32>::new();
            let x = t.constant(inp.clone());
            let w = t.constant(wgt.clone());
            let b = t.constant(bias.clone());
            let y = t.conv2d(x, w, b, stride, pad).unwrap();
            let got = t.value(y);
            let want = conv_reference(&inp, &wgt, &bias, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_forward_is_deterministic() {
        let inp = rand_tensor(vec![2, 3, 16, 16], 41);
        let wgt = rand_tensor(vec![8, 3, 3, 3], 42);
        let bias = rand_tensor(vec![8], 43);
        let run = || {
            let t = Tape::<f32>::new();
            let x = t.constant(inp.clone());
            let w = t.constant(wgt.clone());
            let b = t.constant(bias.clone());
            t.value(t.conv2d(x, w, b, 1, 1).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn conv_rejects_mismatched_shapes() {
        let t = Tape::<f32>::new();
        let x = t.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = t.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        let b = t.constant(Tensor::zeros(vec![1]));
        assert!(matches!(
            t.conv2d(x, w, b, 1, 1),
            Err(CdError::ShapeMismatch(_))
        ));
        let w_big = t.constant(Tensor::zeros(vec![1, 2, 7, 7]));
        assert!(t.conv2d(x, w_big, b, 1, 0).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        assert_eq!(t.value(t.relu(x)).data(), &[0.0, 2.0]);
    }

    #[test]
    fn avg_pool2_means_quads() {
        let t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = t.avg_pool2(x).unwrap();
        assert_eq!(t.value(y).item(), 4.0);
        let odd = t.constant(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(t.avg_pool2(odd).is_err());
    }

    #[test]
    fn upsample_weights_follow_half_pixel_rule() {
        let t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let y = t.upsample_bilinear2x(x).unwrap();
        let out = t.value(y);
        assert_eq!(out.shape(), &[1, 1, 2, 4]);
        let row = &out.data()[..4];
        let want = [1.0, 0.75 * 1.0 + 0.25 * 3.0, 0.25 * 1.0 + 0.75 * 3.0, 3.0];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        // second row repeats the first (height 1 source)
        assert_eq!(&out.data()[..4], &out.data()[4..]);
    }

    #[test]
    fn l2_normalize_rows_345_triangle() {
        let t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let y = t.l2_normalize_rows(x).unwrap();
        let out = t.value(y);
        assert!((out.data()[0] - 0.6).abs() < 1e-6);
        assert!((out.data()[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_channels_unit_norm_per_pixel() {
        let t = Tape::<f32>::new();
        let x = t.constant(rand_tensor(vec![2, 4, 3, 3], 55));
        let y = t.l2_normalize_channels(x).unwrap();
        let out = t.value(y);
        for nn in 0..2 {
            for p in 0..9 {
                let norm: f32 = (0..4)
                    .map(|c| out.data()[(nn * 4 + c) * 9 + p].powi(2))
                    .sum::<f32>()
                    .sqrt();
                assert!((norm - 1.0).abs() < 1e-4, "norm {norm}");
            }
        }
    }

    #[test]
    fn cosine_examples() {
        let t = Tape::<f32>::new();
        let a = t.constant(Tensor::new(vec![3], vec![0.3, -0.7, 0.2]).unwrap());
        let same = t.cosine_similarity(a, a).unwrap();
        assert!((t.value(same).item() - 1.0).abs() < 1e-5);

        let e1 = t.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let e2 = t.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        assert!(t.value(t.cosine_similarity(e1, e2).unwrap()).item().abs() < 1e-7);

        let diag = t.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let c = t.value(t.cosine_similarity(e1, diag).unwrap()).item();
        assert!((c - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn pretext_loss_bounds_and_stop_gradient() {
        let t = Tape::<f32>::new();
        let z = Tensor::new(vec![4], vec![0.5, -0.5, 0.25, 0.1]).unwrap();
        let top = t.leaf(z.clone(), true);
        let bottom = t.leaf(z, true);
        let loss = t.pretext_similarity_loss(top, bottom).unwrap();
        assert!((t.value(loss).item() + 1.0).abs() < 1e-5);

        let grads = t.backward(loss).unwrap();
        assert!(grads.get(top).is_some());
        // gradient through the bottom branch is cut entirely
        assert!(grads.get(bottom).is_none());
    }

    #[test]
    fn repeat_rows_tiles_and_sums_gradients() {
        let t = Tape::<f64>::new();
        let x = t.leaf(
            Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            true,
        );
        let r = t.repeat_rows(x, 3).unwrap();
        let v = t.value(r);
        assert_eq!(v.shape(), &[6, 3]);
        assert_eq!(&v.data()[0..6], &v.data()[6..12]);
        assert_eq!(&v.data()[0..6], &v.data()[12..18]);
        assert_eq!(v.data()[0], 1.0);
        assert_eq!(v.data()[17], 6.0);

        // loss = mean(square(tile)) so dL/dx = 2x/(N*D) regardless of m
        let sq = t.square(r);
        let loss = t.mean(sq);
        let grads = t.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        for (i, &xi) in [1.0, 2.0, 3.0, 4.0, 5.0, 6.0].iter().enumerate() {
            assert!((g[i] - 2.0 * xi / 6.0).abs() < 1e-12, "g[{i}] = {}", g[i]);
        }

        assert!(t.repeat_rows(x, 0).is_err());
    }

    #[test]
    fn pretext_loss_orthogonal_is_zero() {
        let t = Tape::<f32>::new();
        let a = t.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let b = t.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let loss = t.pretext_similarity_loss(a, b).unwrap();
        assert!(t.value(loss).item().abs() < 1e-7);
    }

    #[test]
    fn bce_examples_and_saturation() {
        let t = Tape::<f32>::new();
        let one = t.constant(Tensor::new(vec![1], vec![1.0]).unwrap());

        let l0 = t.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let loss = t.bce_with_logits(l0, one).unwrap();
        assert!((t.value(loss).item() - std::f32::consts::LN_2).abs() < 1e-6);

        let lp = t.constant(Tensor::new(vec![1], vec![100.0]).unwrap());
        let loss = t.bce_with_logits(lp, one).unwrap();
        let v = t.value(loss).item();
        assert!(v.is_finite() && v >= 0.0 && v < 1e-6, "loss {v}");

        let ln = t.constant(Tensor::new(vec![1], vec![-100.0]).unwrap());
        let loss = t.bce_with_logits(ln, one).unwrap();
        let v = t.value(loss).item();
        assert!(v.is_finite() && (v - 100.0).abs() < 1e-3, "loss {v}");
    }

    #[test]
    fn bce_rejects_soft_targets() {
        let t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let soft = t.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        assert!(matches!(
            t.bce_with_logits(x, soft),
            Err(CdError::InvalidTarget(_))
        ));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let t = Tape::<f32>::new();
        let x = t.leaf(Tensor::zeros(vec![3]), true);
        let y = t.relu(x);
        assert!(matches!(t.backward(y), Err(CdError::ShapeMismatch(_))));
    }

    #[test]
    fn constants_get_no_gradient_buffers() {
        let t = Tape::<f32>::new();
        let x = t.constant(rand_tensor(vec![4], 71));
        let w = t.leaf(rand_tensor(vec![4], 72), true);
        let y = t.mean(t.square(t.add(x, w).unwrap()));
        let grads = t.backward(y).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn gradient_accumulates_over_reused_vars() {
        // y = mean(x + x) -> dy/dx = 2/n
        let t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![2], vec![0.3, -0.4]).unwrap(), true);
        let y = t.mean(t.add(x, x).unwrap());
        let grads = t.backward(y).unwrap();
        for &g in grads.get(x).unwrap() {
            assert!((g - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_splits_gradient_by_channel() {
        let t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(vec![1, 1, 2, 2]), true);
        let b = t.leaf(Tensor::zeros(vec![1, 2, 2, 2]), true);
        let cat = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.shape_of(cat), vec![1, 3, 2, 2]);
        let y = t.sum(cat);
        let grads = t.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().len(), 4);
        assert_eq!(grads.get(b).unwrap().len(), 8);
        assert!(grads.get(a).unwrap().iter().all(|&g| g == 1.0));
        assert!(grads.get(b).unwrap().iter().all(|&g| g == 1.0));
    }
}
