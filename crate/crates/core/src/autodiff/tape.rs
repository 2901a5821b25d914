//! Record-on-execute reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! return [`Var`] handles into the tape; [`Tape::backward`] walks the record
//! in reverse and returns the gradients of the leaves and parameters.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels::{self, gemm};
use super::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
    },
    GlobalAvgPool(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        beta: f64,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Jacobian {
        input: Var,
        jacobian: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf or parameter variable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients in tape order; a parameter recorded twice appears twice.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn into_params(self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
    }
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn dims2(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter by reference; its gradient is attributed to `id`.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(&p.value),
            op: Op::Param(id),
            requires_grad: p.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((r, c))) = (dims2(ta), dims2(tb)) else {
            return Err(shape_err("matmul", ta, tb));
        };
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            false,
            tb.data(),
            trans_b,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2(t).ok_or_else(|| shape_err("transpose", t, t))?;
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `b` must match `a` exactly or differ only by a trailing singleton dimension.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(false);
        }
        let (sa, sb) = (ta.shape(), tb.shape());
        let n = sa.len();
        if sb.len() == n && sb[n - 1] == 1 && sa[..n - 1] == sb[..n - 1] {
            Ok(true)
        } else {
            Err(shape_err(op, ta, tb))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let bc = self.broadcast_check(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let d = ta.last_dim();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[if bc { i / d } else { i }]))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Pointwise product; `b` may carry a trailing singleton dimension, which
    /// scales each row of `a` by one value.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// `x · w + b` for `x: m×in`, `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (Some((m, k)), Some((kw, n))) = (dims2(tx), dims2(tw)) else {
            return Err(shape_err("linear", tx, tw));
        };
        if k != kw {
            return Err(shape_err("linear", tx, tw));
        }
        if tb.numel() != n || tb.rank() != 1 {
            return Err(shape_err("linear", tw, tb));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm(m, k, n, tx.data(), false, tw.data(), false, &mut out, true);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        for (row, o) in t.data().chunks(d).zip(out.chunks_mut(d)) {
            kernels::softmax_into(row, o);
        }
        let t = Tensor::new(t.shape(), out).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    ///
    /// `x: cin×h×w`, `w: cout×cin×3×3`, `b: cout` → `cout×h×w`.
    pub fn conv2d_3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let ([cin, h, wd], [cout, cin_w, 3, 3]) = (tx.shape(), tw.shape()) else {
            return Err(shape_err("conv2d_3x3", tx, tw));
        };
        let (cin, h, wd, cout) = (*cin, *h, *wd, *cout);
        if cin != *cin_w || tb.numel() != cout {
            return Err(shape_err("conv2d_3x3", tx, tw));
        }
        let hw = h * wd;
        let cols = kernels::im2col_3x3(tx.data(), cin, h, wd);
        let mut out = Vec::with_capacity(cout * hw);
        for &bias in tb.data() {
            out.extend(std::iter::repeat_n(bias, hw));
        }
        gemm(
            cout,
            cin * 9,
            hw,
            tw.data(),
            false,
            &cols,
            false,
            &mut out,
            true,
        );
        let t = Tensor::new(&[cout, h, wd], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Conv3x3 { x, w, b, cols }, rg))
    }

    /// Mean over every axis after the first: `c×h×w` → `c`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(shape_err("global_avg_pool", t, t));
        }
        let c = t.shape()[0];
        let per = t.numel() / c;
        let out = t
            .data()
            .chunks(per)
            .map(|ch| ch.iter().sum::<f64>() / per as f64)
            .collect();
        let t = Tensor::new(&[c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims2(t).ok_or_else(|| shape_err("slice_cols", t, t))?;
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in t.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(&[r, len], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::Config("empty concat".into()))?);
        let (r, _) = dims2(first).ok_or_else(|| shape_err("concat_cols", first, first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            match dims2(t) {
                Some((rr, c)) if rr == r => widths.push(c),
                _ => return Err(shape_err("concat_cols", first, t)),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(&[r, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    /// Smooth-L1 summed over all elements.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, beta: f64) -> Result<Var> {
        let tp = self.value(pred);
        if tp.numel() != target.numel() {
            return Err(shape_err("smooth_l1", tp, target));
        }
        let loss = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| {
                let d = (p - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let rg = self.rg(pred);
        let op = Op::SmoothL1 {
            pred,
            target: target.data().to_vec(),
            beta,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Negative log-softmax probability of `label`, over all elements of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        if label >= t.numel() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: t.numel(),
            });
        }
        let mut probs = vec![0.0; t.numel()];
        kernels::softmax_into(t.data(), &mut probs);
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[label];
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// Records `value` as a function of `input` whose backward pass applies
    /// the transpose of the supplied `value.numel() × input.numel()` Jacobian.
    ///
    /// The forward value is taken as given; it need not be the function whose
    /// Jacobian is supplied (straight-through estimators rely on this).
    pub fn with_jacobian(&mut self, input: Var, value: Tensor, jacobian: Vec<f64>) -> Result<Var> {
        let n_in = self.value(input).numel();
        if jacobian.len() != value.numel() * n_in {
            return Err(Error::Shape {
                op: "with_jacobian",
                lhs: vec![value.numel(), n_in],
                rhs: vec![jacobian.len()],
            });
        }
        let rg = self.rg(input);
        Ok(self.push(value, Op::Jacobian { input, jacobian }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(node.value.shape(), g)?);
                }
                Op::Param(id) => {
                    leaves[i] = Some(Tensor::new(node.value.shape(), g.clone())?);
                    params.push((*id, g));
                }
                op => self.backward_op(op, &node.value, &g, &mut grads),
            }
        }
        params.reverse();
        Ok(Gradients { leaves, params })
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            &Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = dims2(ta).unwrap();
                let n = out.shape()[1];
                if self.rg(a) {
                    // dA = G · op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), !trans_b, &mut da, false);
                    add_into(&mut grads[a.0], &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    if trans_b {
                        // B is n×k: dB = Gᵀ · A
                        gemm(n, m, k, g, true, ta.data(), false, &mut db, false);
                    } else {
                        gemm(k, m, n, ta.data(), true, g, false, &mut db, false);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = dims2(self.value(x)).unwrap();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            &Op::Reshape(x) => add_into(&mut grads[x.0], g),
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(b) {
                    let db = self.reduce_broadcast(b, g, |gi, _| sign * gi);
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let bc = ta.shape() != tb.shape();
                let d = ta.last_dim();
                if self.rg(a) {
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * tb.data()[if bc { i / d } else { i }])
                        .collect();
                    add_into(&mut grads[a.0], &da);
                }
                if self.rg(b) {
                    let db = self.reduce_broadcast(b, g, |gi, i| gi * ta.data()[i]);
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_into(&mut grads[x.0], &dx);
            }
            &Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(x), self.value(w));
                let (m, k) = dims2(tx).unwrap();
                let n = tw.shape()[1];
                if self.rg(x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tw.data(), true, &mut dx, false);
                    add_into(&mut grads[x.0], &dx);
                }
                if self.rg(w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, tx.data(), true, g, false, &mut dw, false);
                    add_into(&mut grads[w.0], &dw);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::Softmax(x) => {
                let d = out.last_dim();
                let mut dx = vec![0.0; out.numel()];
                for ((y, gr), dr) in out.data().chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = y[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let tg = self.value(*gain);
                if self.rg(*x) {
                    let mut dx = vec![0.0; out.numel()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rs * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.rg(*gain) {
                        add_into(&mut grads[gain.0], &dg);
                    }
                    if self.rg(*bias) {
                        add_into(&mut grads[bias.0], &db);
                    }
                }
            }
            &Op::Gelu(x) => {
                let dx: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gi)| gi * kernels::gelu_grad(v))
                    .collect();
                add_into(&mut grads[x.0], &dx);
            }
            &Op::Relu(x) => {
                let dx: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gi)| if v > 0.0 { *gi } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &dx);
            }
            Op::Conv3x3 { x, w, b, cols } => {
                let tw = self.value(*w);
                let (cout, cin) = (tw.shape()[0], tw.shape()[1]);
                let (h, wd) = (out.shape()[1], out.shape()[2]);
                let hw = h * wd;
                if self.rg(*w) {
                    let mut dw = vec![0.0; cout * cin * 9];
                    gemm(cout, hw, cin * 9, g, false, cols, true, &mut dw, false);
                    add_into(&mut grads[w.0], &dw);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = g.chunks(hw).map(|c| c.iter().sum()).collect();
                    add_into(&mut grads[b.0], &db);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; cin * 9 * hw];
                    gemm(
                        cin * 9,
                        cout,
                        hw,
                        tw.data(),
                        true,
                        g,
                        false,
                        &mut dcols,
                        false,
                    );
                    let dx = kernels::col2im_3x3(&dcols, cin, h, wd);
                    add_into(&mut grads[x.0], &dx);
                }
            }
            &Op::GlobalAvgPool(x) => {
                let tx = self.value(x);
                let per = tx.numel() / tx.shape()[0];
                let dx: Vec<f64> = (0..tx.numel()).map(|i| g[i / per] / per as f64).collect();
                add_into(&mut grads[x.0], &dx);
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = dims2(self.value(x)).unwrap();
                let len = out.shape()[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims2(out).unwrap();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        add_into(&mut grads[p.0], &dp);
                    }
                    offset += c;
                }
            }
            &Op::Sum(x) => {
                let dx = vec![g[0]; self.value(x).numel()];
                add_into(&mut grads[x.0], &dx);
            }
            Op::SmoothL1 { pred, target, beta } => {
                let dx: Vec<f64> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let d = p - t;
                        g[0] * if d.abs() < *beta {
                            d / beta
                        } else {
                            d.signum()
                        }
                    })
                    .collect();
                add_into(&mut grads[pred.0], &dx);
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let dx: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| g[0] * (p - if i == *label { 1.0 } else { 0.0 }))
                    .collect();
                add_into(&mut grads[logits.0], &dx);
            }
            Op::Jacobian { input, jacobian } => {
                let n_in = self.value(*input).numel();
                let mut dx = vec![0.0; n_in];
                for (row, gi) in jacobian.chunks(n_in).zip(g) {
                    dx.iter_mut().zip(row).for_each(|(a, j)| *a += gi * j);
                }
                add_into(&mut grads[input.0], &dx);
            }
        }
    }

    /// Reduces an output-shaped gradient onto `b`, summing over a broadcast axis.
    fn reduce_broadcast(&self, b: Var, g: &[f64], f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
        let tb = self.value(b);
        if tb.numel() == g.len() {
            return g.iter().enumerate().map(|(i, &gi)| f(gi, i)).collect();
        }
        let d = g.len() / tb.numel();
        let mut db = vec![0.0; tb.numel()];
        for (i, &gi) in g.iter().enumerate() {
            db[i / d] += f(gi, i);
        }
        db
    }
}
