//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Values
//! are computed eagerly; [`Tape::backward`] walks the records in reverse and
//! leaves gradients on every node that requires them. The tape is discarded
//! after each step, so nothing is cached between passes.

use std::sync::Arc;

use crate::error::{shape_err, IgtError, Result};
use crate::kernels::{gemm, Csr};
use crate::par;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    SwapAxes12(Var),
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    SpMM {
        adj: Arc<Csr>,
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of primitive applications. Inputs of a node always have
/// smaller indices than the node itself.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

/// Number of times `b` repeats inside `a` when `b`'s shape is a suffix of `a`'s.
fn broadcast_reps(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    Some(a[..a.len() - b.len()].iter().product())
}

/// Batched small matrix product: for each batch `c[i] (+)= a[i] · op(b[i])`.
#[allow(clippy::too_many_arguments)]
fn bmm_kernel(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
) {
    let (sa, sb) = (m * k, k * n);
    par::for_each_row_block(c, m * n, m * k * n, |b0, block| {
        for (bi, cb) in block.chunks_exact_mut(m * n).enumerate() {
            let ab = &a[(b0 + bi) * sa..(b0 + bi + 1) * sa];
            let bb = &b[(b0 + bi) * sb..(b0 + bi + 1) * sb];
            for i in 0..m {
                for p in 0..k {
                    let av = if trans_a {
                        ab[p * m + i]
                    } else {
                        ab[i * k + p]
                    };
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut cb[i * n..(i + 1) * n];
                    if trans_b {
                        for (j, cv) in crow.iter_mut().enumerate() {
                            *cv += av * bb[j * k + p];
                        }
                    } else {
                        for (cv, bv) in crow.iter_mut().zip(&bb[p * n..(p + 1) * n]) {
                            *cv += av * bv;
                        }
                    }
                }
            }
        }
    });
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
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
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    /// Records a trainable copy of `tensor`.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.zero_grad();
        t.set_requires_grad(true);
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient left on `v` by the last [`Tape::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// `a · b` where `b` is a matrix and `a` is treated as rows over its last
    /// axis; leading axes of `a` are preserved.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return shape_err("matmul", &[sa, sb]);
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product of 3-D tensors `[B, m, k] · [B, k, n]`, or
    /// `[B, m, k] · [B, n, k]ᵀ` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return shape_err("bmm", &[sa, sb]);
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        bmm_kernel(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcast_reps(sa, sb).is_none() {
            return shape_err(name, &[sa, sb]);
        }
        let bd = self.value(b).data();
        let bl = bd.len().max(1);
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok((Tensor::new(sa, data)?, rg))
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let t =
            Tensor::new(v.shape(), v.data().iter().map(|x| x * s).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(IgtError::Invalid("concat of nothing".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", &[&base]);
        }
        let mut axis_len = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&u| self.shape(u)).collect();
                return shape_err("concat", &shapes);
            }
            axis_len += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let blk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("slice", &[&s, &[axis, start, len]]);
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Slice { input, axis, start },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return shape_err("mean", &[v.shape()]);
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() == 0 {
            return shape_err("softmax", &[v.shape()]);
        }
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance
    /// (no affine transform).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() == 0 || v.cols() == 0 {
            return shape_err("layer_norm", &[v.shape()]);
        }
        let c = v.cols();
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(v.rows());
        for row in out.chunks_exact_mut(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mu) * r;
            }
            inv_std.push(r);
        }
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LayerNorm { input: a, inv_std }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Swaps axes 1 and 2 of a 4-D tensor: `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return shape_err("swap_axes12", &[&s]);
        }
        let out = swap12(self.value(a).data(), s[0], s[1], s[2], s[3]);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[s[0], s[2], s[1], s[3]], out)?,
            Op::SwapAxes12(a),
            rg,
        ))
    }

    /// Selects rows (leading-axis entries) of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || indices.iter().any(|&i| i >= s[0]) {
            return shape_err("gather_rows", &[&s, &[indices.len()]]);
        }
        let src = self.value(input);
        let mut data = Vec::with_capacity(indices.len() * s[1]);
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(&[indices.len(), s[1]], data)?,
            Op::GatherRows {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Sparse-times-dense product `adj · input`.
    pub fn spmm(&mut self, adj: Arc<Csr>, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || s[0] != adj.n_cols() {
            return shape_err("spmm", &[&[adj.n_rows(), adj.n_cols()], &s]);
        }
        let mut out = vec![0.0; adj.n_rows() * s[1]];
        adj.spmm(self.value(input).data(), s[1], &mut out)?;
        let t = Tensor::new(&[adj.n_rows(), s[1]], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::SpMM { adj, input }, rg))
    }

    /// Reverse pass from a scalar. Gradients are retained on leaf nodes only.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(IgtError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.numel() / k.max(1);
                if rg(*a) {
                    let ga = grad_buf(grads, *a, m * k);
                    gemm(m, n, k, g, false, bv.data(), true, ga, true);
                }
                if rg(*b) {
                    let gb = grad_buf(grads, *b, k * n);
                    gemm(k, m, n, av.data(), true, g, false, gb, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                if rg(*a) {
                    let ga = grad_buf(grads, *a, av.numel());
                    // dA = dC · op(B)ᵀ
                    bmm_kernel(m, n, k, g, false, bv.data(), !*trans_b, ga);
                }
                if rg(*b) {
                    let gb = grad_buf(grads, *b, bv.numel());
                    if *trans_b {
                        // B is [n, k]: dB = dCᵀ · A
                        bmm_kernel(n, m, k, g, true, av.data(), false, gb);
                    } else {
                        // dB = Aᵀ · dC
                        bmm_kernel(k, m, n, av.data(), true, g, false, gb);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if rg(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(*b) {
                    let bl = val(*b).numel();
                    let gb = grad_buf(grads, *b, bl);
                    for chunk in g.chunks_exact(bl.max(1)) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let bl = bd.len().max(1);
                if rg(*a) {
                    let ga = grad_buf(grads, *a, g.len());
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bd[i % bl];
                    }
                }
                if rg(*b) {
                    let gb = grad_buf(grads, *b, bd.len());
                    for (i, (gi, ai)) in g.iter().zip(ad).enumerate() {
                        gb[i % bl] += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(out.shape(), *axis);
                let out_blk = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let blk = val(v).shape()[*axis] * inner;
                    if rg(v) {
                        let gv = grad_buf(grads, v, outer * blk);
                        for o in 0..outer {
                            let src = &g[o * out_blk + offset..o * out_blk + offset + blk];
                            gv[o * blk..(o + 1) * blk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += blk;
                }
            }
            Op::Slice { input, axis, start } => {
                let is = val(*input).shape();
                let (outer, inner) = outer_inner(is, *axis);
                let len = out.shape()[*axis];
                let gi = grad_buf(grads, *input, val(*input).numel());
                for o in 0..outer {
                    let base = o * is[*axis] * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    gi[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = val(*a).numel();
                let s = if matches!(node.op, Op::Mean(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                grad_buf(grads, *a, n).iter_mut().for_each(|x| *x += s);
            }
            Op::Sigmoid(a) => {
                let ga = grad_buf(grads, *a, g.len());
                for ((x, y), s) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += y * s * (1.0 - s);
                }
            }
            Op::Tanh(a) => {
                let ga = grad_buf(grads, *a, g.len());
                for ((x, y), t) in ga.iter_mut().zip(g).zip(out.data()) {
                    *x += y * (1.0 - t * t);
                }
            }
            Op::Relu(a) | Op::Abs(a) => {
                let relu = matches!(node.op, Op::Relu(_));
                let ad = val(*a).data();
                let ga = grad_buf(grads, *a, g.len());
                for ((x, y), &xa) in ga.iter_mut().zip(g).zip(ad) {
                    let d = if relu {
                        if xa > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else if xa > 0.0 {
                        1.0
                    } else if xa < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *x += y * d;
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let ga = grad_buf(grads, *a, g.len());
                for ((gr, yr), xr) in g
                    .chunks_exact(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(ga.chunks_exact_mut(c))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                        *x += yi * (gi - dot);
                    }
                }
            }
            Op::LayerNorm { input, inv_std } => {
                let c = out.cols();
                let ga = grad_buf(grads, *input, g.len());
                for (((gr, yr), xr), r) in g
                    .chunks_exact(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(ga.chunks_exact_mut(c))
                    .zip(inv_std)
                {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                        *x += r * (gi - mg - yi * mgy);
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::SwapAxes12(a) => {
                let s = out.shape();
                let back = swap12(g, s[0], s[1], s[2], s[3]);
                let ga = grad_buf(grads, *a, g.len());
                ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
            }
            Op::GatherRows { input, indices } => {
                let c = out.cols();
                let gi = grad_buf(grads, *input, val(*input).numel());
                for (r, &i) in indices.iter().enumerate() {
                    gi[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::SpMM { adj, input } => {
                let d = out.cols();
                let mut tmp = vec![0.0; adj.n_cols() * d];
                if adj.is_symmetric() {
                    adj.spmm(g, d, &mut tmp)?;
                } else {
                    adj.transpose().spmm(g, d, &mut tmp)?;
                }
                let gi = grad_buf(grads, *input, tmp.len());
                gi.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
            }
        }
        Ok(())
    }
}

fn swap12(src: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let t = ((i * c + k) * b + j) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}
