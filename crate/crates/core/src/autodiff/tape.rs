//! Define-by-run tape. Every primitive appends one node holding its output
//! value and the information its backward rule needs; [`Tape::backward`]
//! replays the nodes in reverse and accumulates into the gradient slots of
//! leaves that require a gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBias(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Mse(usize, usize),
    Sum(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Conv1d {
        x: usize,
        weight: usize,
        bias: usize,
        dilation: usize,
        cols: Vec<T>,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    MulMask {
        x: usize,
        mask: Vec<T>,
    },
    TimeStep {
        x: usize,
        t: usize,
    },
    Reshape(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Batch statistics produced by a training-mode batch normalization, used by
/// the caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance per channel.
    pub var: Vec<T>,
}

#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It receives gradients iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        if tensor.requires_grad && tensor.grad.is_none() {
            tensor.grad = Some(vec![T::ZERO; tensor.numel()]);
        }
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a leaf, if it requires one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        let i = self.check(v).ok()?;
        self.nodes[i].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) {
                node.value.zero_grad();
            }
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Graph(format!(
                "variable belongs to tape {}, not tape {}",
                v.tape, self.id
            )));
        }
        if v.index >= self.nodes.len() {
            return Err(Error::Graph(format!("node {} not on tape", v.index)));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index,
        }
    }

    fn needs_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].value.requires_grad)
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[usize], op: Op<T>) -> Var {
        let mut value = Tensor::new(shape, data).expect("op produced consistent shape");
        value.requires_grad = self.needs_grad(inputs);
        self.push(value, op)
    }

    // ---- primitives -------------------------------------------------------

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            self.nodes[ia].value.data(),
            k as isize,
            1,
            self.nodes[ib].value.data(),
            n as isize,
            1,
            T::ZERO,
            &mut out,
            n as isize,
            1,
        );
        Ok(self.emit(vec![m, n], out, &[ia, ib], Op::MatMul(ia, ib)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(usize, usize, Vec<usize>, Vec<T>)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::dim(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((ia, ib, va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, shape, data) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.emit(shape, data, &[ia, ib], Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, shape, data) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.emit(shape, data, &[ia, ib], Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, shape, data) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.emit(shape, data, &[ia, ib], Op::Mul(ia, ib)))
    }

    /// Multiplication by a scalar constant.
    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let data = v.data().iter().map(|&x| x * s).collect();
        let shape = v.shape().to_vec();
        Ok(self.emit(shape, data, &[ia], Op::Scale(ia, s)))
    }

    /// `x[m×n] + bias[n]`, the bias repeated over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if vx.rank() != 2 || vb.numel() != vx.shape()[1] {
            return Err(Error::dim("add_bias", vx.shape(), vb.shape()));
        }
        let n = vx.shape()[1];
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let shape = vx.shape().to_vec();
        Ok(self.emit(shape, data, &[ix, ib], Op::AddBias(ix, ib)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T) -> Result<(usize, Vec<usize>, Vec<T>)> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        Ok((ia, v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (ia, shape, data) = self.unary(a, |x| if x > T::ZERO { x } else { T::ZERO })?;
        Ok(self.emit(shape, data, &[ia], Op::Relu(ia)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (ia, shape, data) = self.unary(a, |x| {
            if x >= T::ZERO {
                T::ONE / (T::ONE + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::ONE + e)
            }
        })?;
        Ok(self.emit(shape, data, &[ia], Op::Sigmoid(ia)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let (ia, shape, data) = self.unary(a, |x| x.tanh())?;
        Ok(self.emit(shape, data, &[ia], Op::Tanh(ia)))
    }

    /// Mean squared error between two tensors with the same element count.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ip, it) = (self.check(pred)?, self.check(target)?);
        let (vp, vt) = (&self.nodes[ip].value, &self.nodes[it].value);
        if vp.numel() != vt.numel() {
            return Err(Error::dim("mse_loss", vp.shape(), vt.shape()));
        }
        if vp.numel() == 0 {
            return Err(Error::EmptyInput("mse_loss"));
        }
        let n = T::from_f64(vp.numel() as f64);
        let sum: T = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        Ok(self.emit(vec![], vec![sum / n], &[ip, it], Op::Mse(ip, it)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: T = self.nodes[ia].value.data().iter().copied().sum();
        Ok(self.emit(vec![], vec![s], &[ia], Op::Sum(ia)))
    }

    /// Concatenates along `axis`. Operands with no elements are skipped.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let mut idx = Vec::with_capacity(parts.len());
        for &p in parts {
            let i = self.check(p)?;
            if self.nodes[i].value.numel() > 0 {
                idx.push(i);
            }
        }
        let Some(&first) = idx.first() else {
            return Err(Error::EmptyInput("concat"));
        };
        let base = self.nodes[first].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut axis_len = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            axis_len += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &i in &idx {
                let chunk = self.nodes[i].value.shape()[axis] * inner;
                data.extend_from_slice(&self.nodes[i].value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        Ok(self.emit(
            shape,
            data,
            &idx.clone(),
            Op::Concat { inputs: idx, axis },
        ))
    }

    /// Row gather from a `[rows×dim]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let v = &self.nodes[it].value;
        if v.rank() != 2 {
            return Err(Error::dim("gather_rows", v.shape(), &[indices.len()]));
        }
        let (rows, dim) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &r in indices {
            if r >= rows {
                return Err(Error::Index {
                    feature: "gather_rows".into(),
                    value: r,
                    cardinality: rows,
                });
            }
            data.extend_from_slice(&v.data()[r * dim..(r + 1) * dim]);
        }
        Ok(self.emit(
            vec![indices.len(), dim],
            data,
            &[it],
            Op::Gather {
                table: it,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Columns `start..start + len` of a `[m×n]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if v.rank() != 2 || start + len > v.shape()[1] {
            return Err(Error::dim("slice_cols", v.shape(), &[start, len]));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&v.data()[r * n + start..r * n + start + len]);
        }
        Ok(self.emit(vec![m, len], data, &[ix], Op::SliceCols { x: ix, start }))
    }

    /// Causal dilated convolution over `x[C_in × B × T]` with kernel
    /// `[C_out × C_in × k]` and bias `[C_out]`. Tap `i` reads the input
    /// `i·dilation` steps in the past; positions before the start of the
    /// series read zero.
    pub fn conv1d_causal(&mut self, x: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(weight)?, self.check(bias)?);
        let (vx, vw, vb) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        if vx.rank() != 3 || vw.rank() != 3 || vw.shape()[1] != vx.shape()[0] {
            return Err(Error::dim("conv1d_causal", vx.shape(), vw.shape()));
        }
        if vb.numel() != vw.shape()[0] {
            return Err(Error::dim("conv1d_causal", vw.shape(), vb.shape()));
        }
        if dilation == 0 {
            return Err(Error::Contract("dilation must be >= 1".into()));
        }
        let (c_in, b, t) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (c_out, k) = (vw.shape()[0], vw.shape()[2]);
        let bt = b * t;
        let ck = c_in * k;
        let xd = vx.data();
        let mut cols = Vec::with_capacity(ck * bt);
        for c in 0..c_in {
            for i in 0..k {
                let lag = (i * dilation).min(t);
                for s in 0..b {
                    cols.extend(std::iter::repeat_n(T::ZERO, lag));
                    cols.extend_from_slice(&xd[c * bt + s * t..c * bt + s * t + t - lag]);
                }
            }
        }
        let mut out = Vec::with_capacity(c_out * bt);
        for &bias_o in vb.data() {
            out.extend(std::iter::repeat_n(bias_o, bt));
        }
        T::gemm(
            c_out,
            ck,
            bt,
            vw.data(),
            ck as isize,
            1,
            &cols,
            bt as isize,
            1,
            T::ONE,
            &mut out,
            bt as isize,
            1,
        );
        Ok(self.emit(
            vec![c_out, b, t],
            out,
            &[ix, iw, ib],
            Op::Conv1d {
                x: ix,
                weight: iw,
                bias: ib,
                dilation,
                cols,
            },
        ))
    }

    /// Training-mode batch normalization of `x[C × ...]`: every channel is
    /// normalized with its own mean and biased variance over all remaining
    /// axes, then scaled by `gamma` and shifted by `beta`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (vx, vg, vb) = (
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        );
        let c = *vx.shape().first().ok_or(Error::EmptyInput("batch_norm"))?;
        if vg.numel() != c || vb.numel() != c {
            return Err(Error::dim("batch_norm", vx.shape(), vg.shape()));
        }
        let per = vx.numel() / c.max(1);
        if per == 0 {
            return Err(Error::EmptyInput("batch_norm"));
        }
        let n = T::from_f64(per as f64);
        let eps = T::from_f64(eps);
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut out = Vec::with_capacity(vx.numel());
        let mut inv_std = vec![T::ZERO; c];
        let mut stats = BatchStats {
            mean: vec![T::ZERO; c],
            var: vec![T::ZERO; c],
        };
        for ch in 0..c {
            let xs = &vx.data()[ch * per..(ch + 1) * per];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let istd = T::ONE / (var + eps).sqrt();
            inv_std[ch] = istd;
            stats.mean[ch] = mean;
            stats.var[ch] = if per > 1 {
                var * n / T::from_f64((per - 1) as f64)
            } else {
                var
            };
            let (g, b) = (vg.data()[ch], vb.data()[ch]);
            let start = xhat.len();
            xhat.extend(xs.iter().map(|&v| (v - mean) * istd));
            out.extend(xhat[start..].iter().map(|&h| g * h + b));
        }
        let shape = vx.shape().to_vec();
        let var = self.emit(
            shape,
            out,
            &[ix, ig, ib],
            Op::BatchNormTrain {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
        );
        Ok((var, stats))
    }

    /// Evaluation-mode batch normalization with fixed running statistics:
    /// a per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (vx, vg, vb) = (
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        );
        let c = *vx.shape().first().ok_or(Error::EmptyInput("batch_norm"))?;
        if vg.numel() != c || vb.numel() != c || running_mean.len() != c || running_var.len() != c
        {
            return Err(Error::dim("batch_norm", vx.shape(), vg.shape()));
        }
        let per = vx.numel() / c.max(1);
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let mut out = Vec::with_capacity(vx.numel());
        for ch in 0..c {
            let scale = vg.data()[ch] * inv_std[ch];
            let shift = vb.data()[ch] - running_mean[ch] * scale;
            out.extend(vx.data()[ch * per..(ch + 1) * per].iter().map(|&v| v * scale + shift));
        }
        let shape = vx.shape().to_vec();
        Ok(self.emit(
            shape,
            out,
            &[ix, ig, ib],
            Op::BatchNormEval {
                x: ix,
                gamma: ig,
                beta: ib,
                mean: running_mean.to_vec(),
                inv_std,
            },
        ))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if mask.len() != v.numel() {
            return Err(Error::dim("mul_mask", v.shape(), &[mask.len()]));
        }
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = v.shape().to_vec();
        Ok(self.emit(shape, data, &[ix], Op::MulMask { x: ix, mask }))
    }

    /// Selects time step `t` of `x[C × B × T]`, producing `[B × C]`.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if v.rank() != 3 || t >= v.shape()[2] {
            return Err(Error::dim("time_step", v.shape(), &[t]));
        }
        let (c, b, tl) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut data = vec![T::ZERO; b * c];
        for ch in 0..c {
            for s in 0..b {
                data[s * c + ch] = v.data()[ch * b * tl + s * tl + t];
            }
        }
        Ok(self.emit(vec![b, c], data, &[ix], Op::TimeStep { x: ix, t }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::dim("reshape", v.shape(), shape));
        }
        let data = v.data().to_vec();
        Ok(self.emit(shape.to_vec(), data, &[ix], Op::Reshape(ix)))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
    /// Calling it twice without [`Tape::zero_grad`] adds the gradients twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(il + 1, || None);
        grads[il] = Some(vec![T::ONE]);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let slot = self.nodes[i]
                    .value
                    .grad
                    .get_or_insert_with(|| vec![T::ZERO; g.len()]);
                for (s, d) in slot.iter_mut().zip(&g) {
                    *s += *d;
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].value.requires_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let da = slot(grads, *a, m * k);
                    T::gemm(m, n, k, g, n as isize, 1, vb.data(), 1, n as isize, T::ONE, da, k as isize, 1);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let db = slot(grads, *b, k * n);
                    T::gemm(k, m, n, va.data(), 1, k as isize, g, n as isize, 1, T::ONE, db, n as isize, 1);
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if wants(j) {
                        accumulate(grads, j, g.iter().copied());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&gi| -gi));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if wants(*a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(&gi, &y)| gi * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().zip(va).map(|(&gi, &x)| gi * x));
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().map(|&gi| gi * *s));
                }
            }
            Op::AddBias(x, b) => {
                let n = out.shape()[1];
                if wants(*x) {
                    accumulate(grads, *x, g.iter().copied());
                }
                if wants(*b) {
                    let db = slot(grads, *b, n);
                    for row in g.chunks(n) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let xa = nodes[*a].value.data();
                    accumulate(
                        grads,
                        *a,
                        g.iter().zip(xa).map(|(&gi, &x)| if x > T::ZERO { gi } else { T::ZERO }),
                    );
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().zip(out.data()).map(|(&gi, &y)| gi * y * (T::ONE - y)));
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().zip(out.data()).map(|(&gi, &y)| gi * (T::ONE - y * y)));
                }
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (nodes[*p].value.data(), nodes[*t].value.data());
                let coef = g[0] * T::from_f64(2.0 / vp.len() as f64);
                if wants(*p) {
                    accumulate(grads, *p, vp.iter().zip(vt).map(|(&x, &y)| coef * (x - y)));
                }
                if wants(*t) {
                    accumulate(grads, *t, vp.iter().zip(vt).map(|(&x, &y)| -(coef * (x - y))));
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let n = nodes[*a].value.numel();
                    let da = slot(grads, *a, n);
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                let total = shape[*axis] * inner;
                for &j in inputs {
                    let chunk = nodes[j].value.shape()[*axis] * inner;
                    if wants(j) {
                        let dj = slot(grads, j, outer * chunk);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            axpy(&mut dj[o * chunk..(o + 1) * chunk], T::ONE, src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Gather { table, indices } => {
                if wants(*table) {
                    let vt = &nodes[*table].value;
                    let dim = vt.shape()[1];
                    let dt = slot(grads, *table, vt.numel());
                    for (r, &row) in indices.iter().enumerate() {
                        axpy(&mut dt[row * dim..(row + 1) * dim], T::ONE, &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let vx = &nodes[*x].value;
                    let (m, n) = (vx.shape()[0], vx.shape()[1]);
                    let len = out.shape()[1];
                    let dx = slot(grads, *x, m * n);
                    for r in 0..m {
                        axpy(
                            &mut dx[r * n + start..r * n + start + len],
                            T::ONE,
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::Conv1d {
                x,
                weight,
                bias,
                dilation,
                cols,
            } => {
                let vx = &nodes[*x].value;
                let vw = &nodes[*weight].value;
                let (c_in, b, t) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (c_out, k) = (vw.shape()[0], vw.shape()[2]);
                let bt = b * t;
                let ck = c_in * k;
                if wants(*bias) {
                    let db = slot(grads, *bias, c_out);
                    for (o, d) in db.iter_mut().enumerate() {
                        *d += g[o * bt..(o + 1) * bt].iter().copied().sum::<T>();
                    }
                }
                if wants(*weight) {
                    // dW = dOut · colsᵀ
                    let dw = slot(grads, *weight, c_out * ck);
                    T::gemm(c_out, bt, ck, g, bt as isize, 1, cols, 1, bt as isize, T::ONE, dw, ck as isize, 1);
                }
                if wants(*x) {
                    // dcols = Wᵀ · dOut, then scatter back through the causal shift
                    let mut dcols = vec![T::ZERO; ck * bt];
                    T::gemm(ck, c_out, bt, vw.data(), 1, ck as isize, g, bt as isize, 1, T::ZERO, &mut dcols, bt as isize, 1);
                    if grads[*x].is_none() {
                        // Tap 0 has no lag and covers every position.
                        let mut first = Vec::with_capacity(c_in * bt);
                        for c in 0..c_in {
                            first.extend_from_slice(&dcols[c * k * bt..(c * k + 1) * bt]);
                        }
                        grads[*x] = Some(first);
                    } else {
                        let dx = slot(grads, *x, c_in * bt);
                        for c in 0..c_in {
                            axpy(&mut dx[c * bt..(c + 1) * bt], T::ONE, &dcols[c * k * bt..(c * k + 1) * bt]);
                        }
                    }
                    let dx = slot(grads, *x, c_in * bt);
                    for c in 0..c_in {
                        for i in 1..k {
                            let lag = i * dilation;
                            if lag >= t {
                                continue;
                            }
                            let row = &dcols[(c * k + i) * bt..(c * k + i + 1) * bt];
                            for s in 0..b {
                                axpy(
                                    &mut dx[c * bt + s * t..c * bt + s * t + t - lag],
                                    T::ONE,
                                    &row[s * t + lag..s * t + t],
                                );
                            }
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let per = xhat.len() / c;
                let n = T::from_f64(per as f64);
                let vg = nodes[*gamma].value.data();
                let sum_dy: Vec<T> = g.chunks(per).map(|gc| gc.iter().copied().sum()).collect();
                let sum_dy_xhat: Vec<T> = g
                    .chunks(per)
                    .zip(xhat.chunks(per))
                    .map(|(gc, hc)| gc.iter().zip(hc).map(|(&gi, &h)| gi * h).sum())
                    .collect();
                if wants(*gamma) {
                    accumulate(grads, *gamma, sum_dy_xhat.iter().copied());
                }
                if wants(*beta) {
                    accumulate(grads, *beta, sum_dy.iter().copied());
                }
                if wants(*x) {
                    accumulate_chunks(grads, *x, c, per, |ch| {
                        let k = vg[ch] * inv_std[ch] / n;
                        let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                        g[ch * per..(ch + 1) * per]
                            .iter()
                            .zip(&xhat[ch * per..(ch + 1) * per])
                            .map(move |(&gi, &h)| k * (n * gi - sd - h * sdx))
                    });
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = inv_std.len();
                let vx = nodes[*x].value.data();
                let per = vx.len() / c;
                let vg = nodes[*gamma].value.data();
                if wants(*gamma) {
                    let dg = slot(grads, *gamma, c);
                    for ch in 0..c {
                        for j in ch * per..(ch + 1) * per {
                            dg[ch] += g[j] * (vx[j] - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if wants(*beta) {
                    let db = slot(grads, *beta, c);
                    for ch in 0..c {
                        db[ch] += g[ch * per..(ch + 1) * per].iter().copied().sum::<T>();
                    }
                }
                if wants(*x) {
                    accumulate_chunks(grads, *x, c, per, |ch| {
                        let k = vg[ch] * inv_std[ch];
                        g[ch * per..(ch + 1) * per].iter().map(move |&gi| k * gi)
                    });
                }
            }
            Op::MulMask { x, mask } => {
                if wants(*x) {
                    accumulate(grads, *x, g.iter().zip(mask).map(|(&gi, &m)| gi * m));
                }
            }
            Op::TimeStep { x, t } => {
                if wants(*x) {
                    let vx = &nodes[*x].value;
                    let (c, b, tl) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                    let dx = slot(grads, *x, vx.numel());
                    for ch in 0..c {
                        for s in 0..b {
                            dx[ch * b * tl + s * tl + t] += g[s * c + ch];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    accumulate(grads, *x, g.iter().copied());
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], j: usize, len: usize) -> &mut [T] {
    grads[j].get_or_insert_with(|| vec![T::ZERO; len])
}

/// Adds `contrib` into the gradient of node `j`, taking the values as the
/// gradient outright when none has been accumulated yet.
fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], j: usize, contrib: impl Iterator<Item = T>) {
    match &mut grads[j] {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        empty => *empty = Some(contrib.collect()),
    }
}

/// [`accumulate`] for a gradient laid out as `chunks` consecutive runs of
/// `len` values, the run `i` contributed by `contrib(i)`.
fn accumulate_chunks<T: Scalar, I: Iterator<Item = T>>(
    grads: &mut [Option<Vec<T>>],
    j: usize,
    chunks: usize,
    len: usize,
    mut contrib: impl FnMut(usize) -> I,
) {
    match &mut grads[j] {
        Some(acc) => {
            for (i, run) in acc.chunks_mut(len.max(1)).take(chunks).enumerate() {
                run.iter_mut().zip(contrib(i)).for_each(|(a, c)| *a += c);
            }
        }
        empty => {
            let mut acc = Vec::with_capacity(chunks * len);
            for i in 0..chunks {
                acc.extend(contrib(i));
            }
            *empty = Some(acc);
        }
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
