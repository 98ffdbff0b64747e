use std::collections::BTreeMap;

use super::{gemm, ParamId, ParamKind, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batchnorm uses batch statistics (and updates running ones) or
/// the frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics and hyper-parameters handed to [`Graph::batchnorm`].
#[derive(Clone, Copy, Debug)]
pub struct NormStats<'a, T> {
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
    pub eps: T,
    pub momentum: T,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: (usize, usize, usize),
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    ReduceMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchMatmul {
        a: Var,
        b: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Tape of recorded operations.
///
/// Nodes are appended in execution order, so every input precedes its
/// consumer and a single reverse sweep is a valid backward traversal.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: BTreeMap<ParamId, Var>,
    updates: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node {
            op: Op::Leaf,
            value: tensor,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant input.
    pub fn input(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.leaf(tensor)
    }

    /// Copies a stored parameter onto the tape. Repeated calls with the same
    /// id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.requires_grad = store.kind(id) == ParamKind::Trainable;
        t.grad = None;
        let v = self.leaf(t);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Parameters bound to this tape, in parameter order.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[T]> {
        self.bound.get(&id).and_then(|&v| self.grad(v))
    }

    /// Queues a new value for a buffer (e.g. running statistics).
    pub fn push_update(&mut self, id: ParamId, value: Vec<T>) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.updates)
    }

    // ----------------------------------------------------------------- ops

    /// `out[b,o] = Σ_i x[b,i]·w[i,o] + bias[o]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("dense", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::dim("dense", ws, bs));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[1]);
        let mut y = Vec::with_capacity(batch * out);
        let bias = self.value(b).data();
        for _ in 0..batch {
            y.extend_from_slice(bias);
        }
        gemm(
            false,
            false,
            batch,
            out,
            inp,
            self.value(x).data(),
            self.value(w).data(),
            &mut y,
            true,
        );
        let value = Tensor::new(&[batch, out], y)?;
        Ok(self.push(Op::Dense { x, w, b }, value, &[x, w, b]))
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// Output size is `⌊(H + 2·pad − Kh) / stride⌋ + 1`; the kernel must fit
    /// inside the padded input.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x), self.shape(k), self.shape(b));
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim("conv2d", xs, ks));
        }
        if bs != [ks[0]] {
            return Err(Error::dim("conv2d", ks, bs));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (hp, wp) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if hp < ks[2] || wp < ks[3] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} does not fit padded input {hp}x{wp}",
                    ks[2], ks[3]
                ),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            filters: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            out_h: (hp - ks[2]) / stride + 1,
            out_w: (wp - ks[3]) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let (f, patch, bp) = (geom.filters, geom.patch(), geom.batch * geom.positions());
        let mut y = vec![T::zero(); f * bp];
        gemm(false, false, f, bp, patch, self.value(k).data(), &cols, &mut y, false);
        let bias = self.value(b).data();
        let p = geom.positions();
        let mut out = vec![T::zero(); geom.batch * f * p];
        for fi in 0..f {
            for bi in 0..geom.batch {
                let src = &y[fi * bp + bi * p..fi * bp + (bi + 1) * p];
                let dst = &mut out[(bi * f + fi) * p..(bi * f + fi + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[fi];
                }
            }
        }
        let value = Tensor::new(&[geom.batch, f, geom.out_h, geom.out_w], out)?;
        Ok(self.push(Op::Conv2d { x, k, b, geom, cols }, value, &[x, k, b]))
    }

    /// Per-channel normalization of `[B, C, H, W]` or `[M, C]` inputs.
    ///
    /// In [`Mode::Train`] the batch statistics (biased variance) normalize the
    /// input and the returned pair holds the updated running mean/variance
    /// `momentum·running + (1 − momentum)·batch`. In [`Mode::Eval`] the running
    /// statistics are used and nothing is returned.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        mode: Mode,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let xs = self.shape(x);
        let layout = match xs.len() {
            2 => (xs[0], xs[1], 1),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => return Err(Error::shape("batchnorm", format!("expected rank 2 or 4, got {xs:?}"))),
        };
        let (outer, c, inner) = layout;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} has shape {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        if stats.running_mean.len() != c || stats.running_var.len() != c {
            return Err(Error::shape("batchnorm", "running statistics length"));
        }
        let count = outer * inner;
        if mode == Mode::Train && count < 2 {
            return Err(Error::DegenerateBatch { count });
        }
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => channel_moments(xd, layout),
            Mode::Eval => (stats.running_mean.to_vec(), stats.running_var.to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + stats.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let updated = (mode == Mode::Train).then(|| {
            let m = stats.momentum;
            let one_m = T::one() - m;
            let rm = stats
                .running_mean
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| m * r + one_m * b)
                .collect();
            let rv = stats
                .running_var
                .iter()
                .zip(&var)
                .map(|(&r, &b)| m * r + one_m * b)
                .collect();
            (rm, rv)
        });
        let value = Tensor::new(self.shape(x), out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            layout,
            xhat,
            inv_std,
            batch_stats: mode == Mode::Train,
        };
        Ok((self.push(op, value, &[x, gamma, beta]), updated))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(src.shape(), data).expect("relu keeps shape");
        self.push(Op::Relu { x }, value, &[x])
    }

    /// Max pooling over `window×window` patches of a `[B, C, H, W]` input,
    /// no padding. Ties resolve to the lowest flat index.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("maxpool2d", format!("expected rank 4, got {xs:?}")));
        }
        if window == 0 || stride == 0 || xs[2] < window || xs[3] < window {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {window} stride {stride} on {}x{}", xs[2], xs[3]),
            ));
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bc * oh * ow);
        let mut argmax = Vec::with_capacity(bc * oh * ow);
        for plane in 0..bc {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for di in 0..window {
                        for dj in 0..window {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(Op::MaxPool2d { x, argmax }, value, &[x]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        for &v in &xs[1..] {
            let s = self.shape(v);
            let ok = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &s0, s));
            }
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let widths: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &wd) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = s0;
        shape[axis] = total / inner.max(1);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                widths,
            },
            value,
            xs,
        ))
    }

    /// Element-wise maximum over `axis`, removing it. Backward routes the
    /// gradient to the first (lowest-index) maximizer.
    pub fn reduce_max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("reduce_max", format!("axis {axis} out of range for {xs:?}")));
        }
        let n = xs[axis];
        if n == 0 {
            return Err(Error::EmptySet);
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * n * inner;
            let start = out.len();
            out.extend_from_slice(&xd[base..base + inner]);
            argmax.extend((0..inner).map(|d| base + d));
            for k in 1..n {
                let row = &xd[base + k * inner..base + (k + 1) * inner];
                for d in 0..inner {
                    if row[d] > out[start + d] {
                        out[start + d] = row[d];
                        argmax[start + d] = base + k * inner + d;
                    }
                }
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(Op::ReduceMax { x, argmax }, value, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone();
        let mut value = value.reshape(shape)?;
        value.requires_grad = false;
        value.grad = None;
        Ok(self.push(Op::Reshape { x }, value, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(Op::Add { a, b }, value, &[a, b]))
    }

    /// Mean over the spatial dimensions of `[B, C, H, W]`, giving `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected rank 4, got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let scale = T::one() / T::of(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(&[xs[0], xs[1]], data)?;
        Ok(self.push(Op::GlobalAvgPool { x }, value, &[x]))
    }

    /// `[B, N, K] × [B, K, M] → [B, N, M]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let (batch, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * n * m];
        for i in 0..batch {
            gemm(
                false,
                false,
                n,
                m,
                k,
                &ad[i * n * k..(i + 1) * n * k],
                &bd[i * k * m..(i + 1) * k * m],
                &mut out[i * n * m..(i + 1) * n * m],
                false,
            );
        }
        let value = Tensor::new(&[batch, n, m], out)?;
        Ok(self.push(Op::BatchMatmul { a, b }, value, &[a, b]))
    }

    /// Mean squared error `(1/m)·Σ (target − pred)²` as a one-element tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::dim("mse", self.shape(pred), self.shape(target)));
        }
        let m = self.value(pred).numel();
        if m == 0 {
            return Err(Error::shape("mse", "empty prediction"));
        }
        let s: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (t - p) * (t - p))
            .sum();
        let value = Tensor::scalar(s / T::of(m as f64));
        Ok(self.push(Op::Mse { pred, target }, value, &[pred, target]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s), &[x])
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`. Populates `grad` on every node
    /// that depends on a tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::Rank(ls.to_vec()));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &gout, &mut grads);
            self.nodes[i].value.grad = Some(gout);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out = self.shape(*w)[1];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); batch * inp];
                    gemm(false, true, batch, inp, out, gout, self.value(*w).data(), &mut dx, false);
                    accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); inp * out];
                    gemm(true, false, inp, out, batch, self.value(*x).data(), gout, &mut dw, false);
                    accumulate(grads, *w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); out];
                    for row in gout.chunks(out) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, k, b, geom, cols } => {
                let (f, patch, p) = (geom.filters, geom.patch(), geom.positions());
                let bp = geom.batch * p;
                // gout is [B, F, P]; regroup as [F, B·P].
                let mut gy = vec![T::zero(); f * bp];
                for bi in 0..geom.batch {
                    for fi in 0..f {
                        let src = &gout[(bi * f + fi) * p..(bi * f + fi + 1) * p];
                        gy[fi * bp + bi * p..fi * bp + (bi + 1) * p].copy_from_slice(src);
                    }
                }
                if self.wants(*k) {
                    let mut dk = vec![T::zero(); f * patch];
                    gemm(false, true, f, patch, bp, &gy, cols, &mut dk, false);
                    accumulate(grads, *k, dk);
                }
                if self.wants(*b) {
                    let db = gy.chunks(bp).map(|r| r.iter().copied().sum()).collect();
                    accumulate(grads, *b, db);
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); patch * bp];
                    gemm(true, false, patch, bp, f, self.value(*k).data(), &gy, &mut dcols, false);
                    accumulate(grads, *x, col2im(&dcols, geom));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (outer, c, inner) = *layout;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for idx in base..base + inner {
                            dgamma[ch] += gout[idx] * xhat[idx];
                            dbeta[ch] += gout[idx];
                        }
                    }
                }
                if self.wants(*x) {
                    let g = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); gout.len()];
                    if *batch_stats {
                        let m = T::of((outer * inner) as f64);
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * inner;
                                let scale = g[ch] * inv_std[ch] / m;
                                for idx in base..base + inner {
                                    dx[idx] = scale
                                        * (m * gout[idx] - dbeta[ch] - xhat[idx] * dgamma[ch]);
                                }
                            }
                        }
                    } else {
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * inner;
                                let scale = g[ch] * inv_std[ch];
                                for idx in base..base + inner {
                                    dx[idx] = scale * gout[idx];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::MaxPool2d { x, argmax } | Op::ReduceMax { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &g) in argmax.iter().zip(gout) {
                    dx[src] += g;
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { xs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &wd) in xs.iter().zip(widths) {
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * wd);
                        for o in 0..*outer {
                            let start = o * total + offset;
                            dv.extend_from_slice(&gout[start..start + wd]);
                        }
                        accumulate(grads, v, dv);
                    }
                    offset += wd;
                }
            }
            Op::Reshape { x } => accumulate(grads, *x, gout.to_vec()),
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, gout.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gout.to_vec());
                }
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let scale = T::one() / T::of(hw as f64);
                let dx = gout
                    .iter()
                    .flat_map(|&g| std::iter::repeat(g * scale).take(hw))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::BatchMatmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); batch * n * k];
                    for i in 0..batch {
                        gemm(
                            false,
                            true,
                            n,
                            k,
                            m,
                            &gout[i * n * m..(i + 1) * n * m],
                            &bd[i * k * m..(i + 1) * k * m],
                            &mut da[i * n * k..(i + 1) * n * k],
                            false,
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); batch * k * m];
                    for i in 0..batch {
                        gemm(
                            true,
                            false,
                            k,
                            m,
                            n,
                            &ad[i * n * k..(i + 1) * n * k],
                            &gout[i * n * m..(i + 1) * n * m],
                            &mut db[i * k * m..(i + 1) * k * m],
                            false,
                        );
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let scale = T::of(2.0) * gout[0] / T::of(p.len() as f64);
                let dp: Vec<T> = p.iter().zip(t).map(|(&a, &b)| scale * (a - b)).collect();
                if self.wants(*target) {
                    accumulate(grads, *target, dp.iter().map(|&v| -v).collect());
                }
                if self.wants(*pred) {
                    accumulate(grads, *pred, dp);
                }
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![gout[0]; n]);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Per-channel mean and biased variance under an `(outer, C, inner)` layout.
fn channel_moments<T: Real>(x: &[T], (outer, c, inner): (usize, usize, usize)) -> (Vec<T>, Vec<T>) {
    let n = T::of((outer * inner) as f64);
    let mut mean = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            mean[ch] += x[base..base + inner].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            var[ch] += x[base..base + inner]
                .iter()
                .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Unfolds `[B, C, H, W]` into a `[C·Kh·Kw, B·OH·OW]` patch matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, bp) = (g.positions(), g.batch * g.positions());
    let mut cols = vec![T::zero(); g.patch() * bp];
    for c in 0..g.channels {
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let row = (c * g.kh + kh) * g.kw + kw;
                for b in 0..g.batch {
                    let plane = &x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut cols[row * bp + b * p..row * bp + (b + 1) * p];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * g.width..][..g.width];
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst[oh * g.out_w + ow] = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (p, bp) = (g.positions(), g.batch * g.positions());
    let mut x = vec![T::zero(); g.batch * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for kh in 0..g.kh {
            for kw in 0..g.kw {
                let row = (c * g.kh + kh) * g.kw + kw;
                for b in 0..g.batch {
                    let plane_off = (b * g.channels + c) * g.height * g.width;
                    let src = &cols[row * bp + b * p..row * bp + (b + 1) * p];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.width as isize {
                                x[plane_off + ih as usize * g.width + iw as usize] +=
                                    src[oh * g.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
