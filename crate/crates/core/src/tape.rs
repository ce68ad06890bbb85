//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so parents always precede children. [`Tape::backward`] walks the nodes once
//! in reverse and accumulates vector-Jacobian products. Tapes are built per
//! forward pass and dropped afterwards; only first-order gradients exist.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{LfitError, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    axis_split, matmul_acc, matmul_at_acc, matmul_bt_acc, matmul_dims, row_moments, softmax_axis,
    Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
        transpose_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var, f64),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
        total: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    RepeatRows {
        x: Var,
        reps: usize,
        row: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
        width: usize,
    },
    Sum(Var),
    Mean(Var),
    QuantileLoss {
        pred: Var,
        target: Vec<f64>,
        quantiles: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    leaf_params: Vec<(ParamId, Var)>,
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(LfitError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (gradients are reported for it).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a stored parameter as a leaf, once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.param_vars[id.0] = Some(v);
        self.leaf_params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` transposed).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", sa, sb);
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err("bmm", sa, sb);
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let aa = &ad[i * m * k..(i + 1) * m * k];
                let bb = &bd[i * k * n..(i + 1) * k * n];
                let oo = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    matmul_bt_acc(aa, bb, oo, m, k, n);
                } else {
                    matmul_acc(aa, bb, oo, m, k, n);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let op = Op::BatchMatMul {
            a,
            b,
            transpose_b,
            batch,
            m,
            k,
            n,
        };
        Ok(self.push(Tensor::new(vec![batch, m, n], out)?, op, rg))
    }

    /// `x · wᵀ + b` over the trailing axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return shape_err("linear", &sx, sw);
        }
        let (out, inp) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.value(b).len() != out {
                return shape_err("linear bias", sw, self.shape(b));
            }
        }
        let rows = self.value(x).len() / inp.max(1);
        // wᵀ is [in, out] so every row update is a contiguous axpy.
        let wd = self.value(w).data();
        let mut wt = vec![0.0; inp * out];
        for o in 0..out {
            for i in 0..inp {
                wt[i * out + o] = wd[o * inp + i];
            }
        }
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in y.chunks_mut(out) {
                r.copy_from_slice(bd);
            }
        }
        matmul_acc(self.value(x).data(), &wt, &mut y, rows, inp, out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let op = Op::Linear {
            x,
            w,
            b,
            rows,
            inp,
            out,
        };
        Ok(self.push(Tensor::new(shape, y)?, op, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(name, self.shape(a), self.shape(b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[..., n] + b[n]`: the only broadcasting pattern supported.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(b).len() != n {
            return shape_err("add_bias", self.shape(x), self.shape(b));
        }
        let bd = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for r in data.chunks_mut(n) {
            for (v, bb) in r.iter_mut().zip(&bd) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(value.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Element-wise product with a fixed (non-differentiable) factor, e.g. a dropout mask.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return shape_err("mul_const", self.shape(x), &[factor.len()]);
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&factor)
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulConst(x, factor), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, math::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, math::tanh, Op::Tanh(x))
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Var {
        self.unary(x, |v| math::elu(v, alpha), Op::Elu(x, alpha))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let mut data = self.value(x).data().to_vec();
        softmax_axis(&mut data, outer, len, inner);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let op = Op::Softmax {
            x,
            outer,
            len,
            inner,
        };
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    /// Softmax over the last axis of `[..., q, k]` where `allowed[q*k]` marks
    /// admissible entries. Disallowed entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 2] * shape[shape.len() - 1] != allowed.len() {
            return shape_err("masked_softmax", &shape, &[allowed.len()]);
        }
        let k = shape[shape.len() - 1];
        let block = allowed.len();
        let mut data = self.value(x).data().to_vec();
        for (ri, row) in data.chunks_mut(k).enumerate() {
            let mask = &allowed[(ri * k) % block..(ri * k) % block + k];
            let mut max = f64::NEG_INFINITY;
            for (v, &ok) in row.iter().zip(mask) {
                if ok {
                    max = max.max(*v);
                }
            }
            let mut sum = 0.0;
            for (v, &ok) in row.iter_mut().zip(mask) {
                *v = if ok { math::exp(*v - max) } else { 0.0 };
                sum += *v;
            }
            if sum > 0.0 {
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::MaskedSoftmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return shape_err("layer_norm", self.shape(x), self.shape(gain));
        }
        let rows = self.value(x).len() / n;
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        {
            let (xd, gd, bd) = (
                self.value(x).data(),
                self.value(gain).data(),
                self.value(bias).data(),
            );
            for r in 0..rows {
                let row = &xd[r * n..(r + 1) * n];
                let (mu, inv) = row_moments(row, eps);
                inv_std[r] = inv;
                for j in 0..n {
                    let h = (row[j] - mu) * inv;
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * gd[j] + bd[j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(LfitError::Contract("concat of zero tensors".into())),
        };
        let (outer, _, inner) = axis_split(&first, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return shape_err("concat", &first, s);
            }
            lens.push((p, s[axis]));
        }
        let total: usize = lens.iter().map(|(_, l)| l).sum();
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &(p, l) in &lens {
            let d = self.value(p).data();
            for o in 0..outer {
                let src = &d[o * l * inner..(o + 1) * l * inner];
                let dst = (o * total + offset) * inner;
                out[dst..dst + l * inner].copy_from_slice(src);
            }
            offset += l;
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        let op = Op::Concat {
            parts: lens,
            outer,
            inner,
            total,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len_in, inner) = axis_split(&shape, axis)?;
        if start + len > len_in {
            return Err(LfitError::Contract(format!(
                "narrow [{start}, {}) out of range on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * len_in + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(x);
        let op = Op::Narrow {
            x,
            outer,
            len_in,
            start,
            len,
            inner,
        };
        Ok(self.push(Tensor::new(new_shape, out)?, op, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Repeats each leading-axis slice `reps` times: `[B, ...] -> [B*reps, ...]`
    /// with output row `b*reps + r` equal to input row `b`.
    pub fn repeat_rows(&mut self, x: Var, reps: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || reps == 0 {
            return shape_err("repeat_rows", &shape, &[reps]);
        }
        let row: usize = shape[1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(d.len() * reps);
        for r in d.chunks(row.max(1)) {
            for _ in 0..reps {
                out.extend_from_slice(r);
            }
        }
        let mut new_shape = shape;
        new_shape[0] *= reps;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::RepeatRows { x, reps, row }, rg))
    }

    /// Row lookup into a `[V, d]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return shape_err("gather_rows", &s, &[indices.len()]);
        }
        let (v, width) = (s[0], s[1]);
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= v {
                return Err(LfitError::Contract(format!(
                    "lookup index {i} outside table of {v} rows"
                )));
            }
            out.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let rg = self.rg(table);
        let op = Op::Gather {
            table,
            indices: indices.to_vec(),
            width,
        };
        Ok(self.push(Tensor::new(vec![indices.len(), width], out)?, op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean pinball loss of `pred[..., Q]` against `target[...]` (one target per
    /// quantile group), averaged over every element and quantile.
    pub fn quantile_loss(&mut self, pred: Var, target: &[f64], quantiles: &[f64]) -> Result<Var> {
        let q = quantiles.len();
        let p = self.value(pred).data();
        if q == 0 || p.len() != target.len() * q {
            return shape_err("quantile_loss", self.shape(pred), &[target.len(), q]);
        }
        let mut total = 0.0;
        for (i, &y) in target.iter().enumerate() {
            for (j, &qq) in quantiles.iter().enumerate() {
                total += pinball(p[i * q + j], y, qq);
            }
        }
        let value = total / p.len() as f64;
        let rg = self.rg(pred);
        let op = Op::QuantileLoss {
            pred,
            target: target.to_vec(),
            quantiles: quantiles.to_vec(),
        };
        Ok(self.push(Tensor::scalar(value), op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(LfitError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                acc(*a, &mut |ga| matmul_bt_acc(g, val(*b), ga, m, n, k));
                acc(*b, &mut |gb| matmul_at_acc(val(*a), g, gb, m, k, n));
            }
            &Op::BatchMatMul {
                a,
                b,
                transpose_b,
                batch,
                m,
                k,
                n,
            } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bd[i * k * n..(i + 1) * k * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if transpose_b {
                            // b is [n, k]: dA = dC · B
                            matmul_acc(gi, bb, out, m, n, k);
                        } else {
                            matmul_bt_acc(gi, bb, out, m, n, k);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let aa = &ad[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if transpose_b {
                            // dB[n, k] = dCᵀ · A
                            matmul_at_acc(gi, aa, out, m, n, k);
                        } else {
                            matmul_at_acc(aa, gi, out, m, k, n);
                        }
                    }
                });
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                // y[r, o] = Σ_i x[r, i] w[o, i] + b[o]
                acc(x, &mut |gx| matmul_acc(g, val(w), gx, rows, out, inp));
                acc(w, &mut |gw| matmul_at_acc(g, val(x), gw, rows, out, inp));
                if let Some(b) = b {
                    acc(b, &mut |gb| {
                        for r in g.chunks(out) {
                            for (a, v) in gb.iter_mut().zip(r) {
                                *a += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let n = nodes[b.0].value.len();
                acc(*b, &mut |gb| {
                    for r in g.chunks(n) {
                        add_into(gb, r);
                    }
                });
            }
            &Op::Scale(x, c) => acc(x, &mut |gx| {
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += c * v;
                }
            }),
            Op::MulConst(x, f) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * f[i];
                }
            }),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            &Op::Elu(x, alpha) => {
                let xd = val(x);
                acc(x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * math::elu_grad(xd[i], alpha);
                    }
                });
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += y[base + j * inner] * g[base + j * inner];
                            }
                            for j in 0..len {
                                let ix = base + j * inner;
                                gx[ix] += y[ix] * (g[ix] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let k = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for ((yr, gr), out) in y.chunks(k).zip(g.chunks(k)).zip(gx.chunks_mut(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = nodes[gain.0].value.len();
                let gd = val(*gain);
                acc(*x, &mut |gx| {
                    let nf = n as f64;
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gd[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..n {
                            let dh = gr[j] * gd[j];
                            gx[r * n + j] += inv * (dh - s1 / nf - hr[j] * s2 / nf);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                inner,
                total,
            } => {
                let mut offset = 0;
                for &(p, l) in parts {
                    acc(p, &mut |gp| {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * l * inner;
                            add_into(&mut gp[dst..dst + l * inner], &g[src..src + l * inner]);
                        }
                    });
                    offset += l;
                }
            }
            &Op::Narrow {
                x,
                outer,
                len_in,
                start,
                len,
                inner,
            } => acc(x, &mut |gx| {
                for o in 0..outer {
                    let dst = (o * len_in + start) * inner;
                    let src = o * len * inner;
                    add_into(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            &Op::RepeatRows { x, reps, row } => acc(x, &mut |gx| {
                for (b, out) in gx.chunks_mut(row.max(1)).enumerate() {
                    for r in 0..reps {
                        let src = (b * reps + r) * row;
                        add_into(out, &g[src..src + row]);
                    }
                }
            }),
            Op::Gather {
                table,
                indices,
                width,
            } => acc(*table, &mut |gt| {
                for (r, &i) in indices.iter().enumerate() {
                    add_into(
                        &mut gt[i * width..(i + 1) * width],
                        &g[r * width..(r + 1) * width],
                    );
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len().max(1) as f64;
                acc(*x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                })
            }
            Op::QuantileLoss {
                pred,
                target,
                quantiles,
            } => {
                let p = val(*pred);
                let q = quantiles.len();
                let scale = g[0] / p.len() as f64;
                acc(*pred, &mut |gp| {
                    for (i, &y) in target.iter().enumerate() {
                        for (j, &qq) in quantiles.iter().enumerate() {
                            gp[i * q + j] += scale * pinball_slope(p[i * q + j], y, qq);
                        }
                    }
                });
            }
        }
    }

    /// Gradients for every registered parameter, zeros where a parameter did
    /// not take part in the loss.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for &(id, v) in &self.leaf_params {
            if let Some(g) = grads.raw(v) {
                out[id.0].data_mut().copy_from_slice(g);
            }
        }
        out
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `max(q·e, (q−1)·e)` with `e = target − pred`.
pub fn pinball(pred: f64, target: f64, q: f64) -> f64 {
    let e = target - pred;
    (q * e).max((q - 1.0) * e)
}

fn pinball_slope(pred: f64, target: f64, q: f64) -> f64 {
    if target > pred {
        -q
    } else if target < pred {
        1.0 - q
    } else {
        0.0
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v` (zeros when `v` did not influence the loss).
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.raw(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}
