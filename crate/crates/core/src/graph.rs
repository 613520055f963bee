//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Recurrent and
//! convolutional layers are recorded as single fused nodes with hand-written
//! backward passes, which keeps the tape short even for long sequences.
//! Parameters are read straight from the borrowed [`ParamStore`], so building
//! a graph never copies weights.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{sigmoid, tanh};
use crate::metrics;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Val {
    Owned(Tensor),
    Param(ParamId),
}

struct GruCache {
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    ghn: Vec<f64>,
    h_prev: Vec<f64>,
}

struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Select { a: Var, axis: usize, indices: Vec<usize> },
    Gru { x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, reverse: bool, cache: Box<GruCache> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: Box<BnCache> },
    Sum(Var),
    Mean(Var),
    L1 { a: Var, b: Var },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Ccc { pred: Var, target: Vec<f64> },
}

struct Node {
    val: Val,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }

    /// Largest absolute gradient entry across all parameters.
    pub fn max_abs(&self) -> f64 {
        self.grads.iter().flatten().fold(0.0, |m, g| m.max(g.max_abs()))
    }
}

/// Running-statistics update emitted by a batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub id: ParamId,
    pub value: Tensor,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
    trainable: Vec<bool>,
    training: bool,
    buffer_updates: Vec<BufferUpdate>,
}

fn shape_err<T>(msg: alloc::string::String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<'s> Graph<'s> {
    /// New tape over `store`. `training` selects batch statistics in
    /// normalization layers.
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        let trainable = store.entries().iter().map(|e| e.trainable).collect();
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            trainable,
            training,
            buffer_updates: Vec::new(),
        }
    }

    /// Exclude every parameter whose name starts with `prefix` from
    /// differentiation. Must be called before those parameters are used.
    pub fn freeze_prefix(mut self, prefix: &str) -> Self {
        for id in self.store.ids_with_prefix(prefix) {
            self.trainable[id] = false;
        }
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        core::mem::take(&mut self.buffer_updates)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].val {
            Val::Owned(t) => t,
            Val::Param(id) => self.store.get(*id),
        }
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, t: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { val: Val::Owned(t), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that participates in differentiation without being a stored
    /// parameter; its gradient is returned by [`Graph::backward_with_inputs`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let rg = self.trainable[id];
        self.nodes.push(Node { val: Val::Param(id), op: Op::Leaf, requires_grad: rg });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- elementwise --------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(alloc::format!("{what}: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y, "sub")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    // ---- structural ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of nothing".into());
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return shape_err(alloc::format!("concat axis {axis} on {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return shape_err(alloc::format!("concat: {first:?} vs {s:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let w = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Gather `indices` along `axis` (repeats allowed).
    pub fn select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return shape_err(alloc::format!("select axis {axis} on {shape:?}"));
        }
        let dim = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return shape_err(alloc::format!("select index {bad} out of {dim} on axis {axis}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * dim + i) * inner;
                data.extend_from_slice(&src[s..s + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let rg = self.rg(a);
        let t = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(t, Op::Select { a, axis, indices: indices.to_vec() }, rg))
    }

    // ---- dense --------------------------------------------------------------

    /// `x · w + b` over the last dimension of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return shape_err(alloc::format!("linear: input {xs:?} with weight {ws:?}"));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return shape_err(alloc::format!("linear bias {:?} for {dout} outputs", bv.shape()));
            }
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
            }
            gemm(rows, din, dout, self.value(x).data(), false, self.value(w).data(), false, 1.0, &mut out);
        } else {
            gemm(rows, din, dout, self.value(x).data(), false, self.value(w).data(), false, 0.0, &mut out);
        }
        let mut os = xs;
        *os.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_vec(&os, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// One GRU layer over `x: [batch, time, in]` starting from a zero state.
    /// Gate order in the packed weights is (reset, update, candidate);
    /// `w_ih: [in, 3H]`, `w_hh: [H, 3H]`. `reverse` runs from the last step to
    /// the first; outputs stay aligned with input time.
    pub fn gru(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let wi = self.shape(w_ih).to_vec();
        let wh = self.shape(w_hh).to_vec();
        if xs.len() != 3 || wi.len() != 2 || wh.len() != 2 || wi[0] != xs[2] || wh[1] != 3 * wh[0] || wi[1] != wh[1] {
            return shape_err(alloc::format!("gru: input {xs:?}, w_ih {wi:?}, w_hh {wh:?}"));
        }
        let (bsz, steps, din, h) = (xs[0], xs[1], xs[2], wh[0]);
        let g3 = 3 * h;
        if self.value(b_ih).len() != g3 || self.value(b_hh).len() != g3 {
            return shape_err("gru: bias length".into());
        }
        let mut xg = vec![0.0; bsz * steps * g3];
        {
            let bi = self.value(b_ih).data();
            for r in 0..bsz * steps {
                xg[r * g3..(r + 1) * g3].copy_from_slice(bi);
            }
        }
        gemm(bsz * steps, din, g3, self.value(x).data(), false, self.value(w_ih).data(), false, 1.0, &mut xg);

        let n_out = bsz * steps * h;
        let mut cache = GruCache {
            r: vec![0.0; n_out],
            z: vec![0.0; n_out],
            n: vec![0.0; n_out],
            ghn: vec![0.0; n_out],
            h_prev: vec![0.0; n_out],
        };
        let mut out = vec![0.0; n_out];
        let mut hcur = vec![0.0; bsz * h];
        let mut hg = vec![0.0; bsz * g3];
        let whh = self.value(w_hh).data();
        let bhh = self.value(b_hh).data();
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            for b in 0..bsz {
                hg[b * g3..(b + 1) * g3].copy_from_slice(bhh);
            }
            gemm(bsz, h, g3, &hcur, false, whh, false, 1.0, &mut hg);
            for b in 0..bsz {
                let xrow = &xg[(b * steps + t) * g3..(b * steps + t + 1) * g3];
                let hrow = &hg[b * g3..(b + 1) * g3];
                let base = (b * steps + t) * h;
                for j in 0..h {
                    let r = sigmoid(xrow[j] + hrow[j]);
                    let z = sigmoid(xrow[h + j] + hrow[h + j]);
                    let ghn = hrow[2 * h + j];
                    let n = tanh(xrow[2 * h + j] + r * ghn);
                    let hp = hcur[b * h + j];
                    let hn = (1.0 - z) * n + z * hp;
                    cache.r[base + j] = r;
                    cache.z[base + j] = z;
                    cache.n[base + j] = n;
                    cache.ghn[base + j] = ghn;
                    cache.h_prev[base + j] = hp;
                    out[base + j] = hn;
                }
            }
            for b in 0..bsz {
                let base = (b * steps + t) * h;
                hcur[b * h..(b + 1) * h].copy_from_slice(&out[base..base + h]);
            }
        }
        let rg = [x, w_ih, w_hh, b_ih, b_hh].iter().any(|&v| self.rg(v));
        let t = Tensor::from_vec(&[bsz, steps, h], out)?;
        Ok(self.push(t, Op::Gru { x, w_ih, w_hh, b_ih, b_hh, reverse, cache: Box::new(cache) }, rg))
    }

    // ---- convolution --------------------------------------------------------

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return shape_err(alloc::format!("conv2d: input {xs:?} weight {ws:?}"));
        }
        let (n, c, hi, wi) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if hi + 2 * pad < k || wi + 2 * pad < k {
            return shape_err(alloc::format!("conv2d: kernel {k} larger than padded input {xs:?}"));
        }
        let geo = ConvGeom::new(c, hi, wi, k, stride, pad);
        let ckk = c * k * k;
        let hw = geo.ho * geo.wo;
        let mut cols = vec![0.0; ckk * hw];
        let mut out = vec![0.0; n * o * hw];
        let bias = self.value(b).data();
        for img in 0..n {
            geo.im2col(&self.value(x).data()[img * c * hi * wi..(img + 1) * c * hi * wi], &mut cols);
            let dst = &mut out[img * o * hw..(img + 1) * o * hw];
            for oc in 0..o {
                dst[oc * hw..(oc + 1) * hw].iter_mut().for_each(|v| *v = bias[oc]);
            }
            gemm(o, ckk, hw, self.value(w).data(), false, &cols, false, 1.0, dst);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let t = Tensor::from_vec(&[n, o, geo.ho, geo.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Transposed 2-D convolution, `x: [N, Cin, H, W]`, `w: [Cin, Cout, k, k]`,
    /// output spatial size `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return shape_err(alloc::format!("conv_transpose2d: input {xs:?} weight {ws:?}"));
        }
        let (n, cin, hi, wi) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        if (hi - 1) * stride + k < 2 * pad + 1 || (wi - 1) * stride + k < 2 * pad + 1 {
            return shape_err(alloc::format!("conv_transpose2d: padding {pad} too large"));
        }
        let ho = (hi - 1) * stride + k - 2 * pad;
        let wo = (wi - 1) * stride + k - 2 * pad;
        let geo = ConvGeom::new(cout, ho, wo, k, stride, pad);
        debug_assert_eq!((geo.ho, geo.wo), (hi, wi));
        let ckk = cout * k * k;
        let hw = hi * wi;
        let mut cols = vec![0.0; ckk * hw];
        let mut out = vec![0.0; n * cout * ho * wo];
        let bias = self.value(b).data();
        for img in 0..n {
            gemm(ckk, cin, hw, self.value(w).data(), true, &self.value(x).data()[img * cin * hw..(img + 1) * cin * hw], false, 0.0, &mut cols);
            let dst = &mut out[img * cout * ho * wo..(img + 1) * cout * ho * wo];
            for oc in 0..cout {
                dst[oc * ho * wo..(oc + 1) * ho * wo].iter_mut().for_each(|v| *v = bias[oc]);
            }
            geo.col2im(&cols, dst);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let t = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        Ok(self.push(t, Op::ConvT2d { x, w, b, stride, pad }, rg))
    }

    /// Per-channel normalization of `x: [N, C, ...]`. In training mode batch
    /// statistics are used and the returned `(mean, biased var)` are the batch
    /// moments; otherwise `running` supplies `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.value(gamma).len() != xs[1] || self.value(beta).len() != xs[1] {
            return shape_err(alloc::format!("batch_norm on {xs:?}"));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let m = (n * inner) as f64;
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = if self.training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for img in 0..n {
                    s += xv[(img * c + ch) * inner..(img * c + ch + 1) * inner].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut q = 0.0;
                for img in 0..n {
                    q += xv[(img * c + ch) * inner..(img * c + ch + 1) * inner]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = q / m;
            }
            (mean, var, true)
        } else {
            (running.0.to_vec(), running.1.to_vec(), false)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for img in 0..n {
            for ch in 0..c {
                let s = (img * c + ch) * inner;
                for i in s..s + inner {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::from_vec(&xs, out)?;
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, cache: Box::new(BnCache { xhat, inv_std, batch_stats }) }, rg);
        Ok((v, if batch_stats { Some((mean, var)) } else { None }))
    }

    pub fn record_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push(BufferUpdate { id, value });
    }

    // ---- reductions and losses ----------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.is_empty() {
            return shape_err(alloc::format!("l1: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / ta.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::L1 { a, b }, rg))
    }

    /// Mean cross-entropy of `softmax(logits)` rows against class targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() || ls[0] == 0 {
            return shape_err(alloc::format!("cross entropy: logits {ls:?}, {} targets", targets.len()));
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Label(alloc::format!("target {t} out of {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
            let lz = mx + libm::log(z);
            for j in 0..k {
                probs[i * k + j] = libm::exp(row[j] - lz);
            }
            loss += lz - row[targets[i]];
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss / n as f64), Op::SoftmaxCe { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Mean over rows of `1 - (ccc + 1) / 2` between each row of `pred`
    /// (`[B, T]` or `[T]`) and the matching slice of `target`.
    pub fn ccc_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        let p = self.value(pred).data();
        if p.len() != target.len() || ps.is_empty() {
            return shape_err(alloc::format!("ccc loss: pred {ps:?}, {} targets", target.len()));
        }
        let len = *ps.last().unwrap();
        if len < 2 {
            return Err(Error::TooShort { need: 2, got: len });
        }
        let rows = p.len() / len;
        let mut total = 0.0;
        for r in 0..rows {
            let c = metrics::ccc(&target[r * len..(r + 1) * len], &p[r * len..(r + 1) * len])?;
            total += (1.0 - c.ccc) / 2.0;
        }
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(total / rows as f64), Op::Ccc { pred, target: target.to_vec() }, rg))
    }

    // ---- backward -----------------------------------------------------------

    /// Differentiate the scalar `loss` and collect gradients of every
    /// trainable parameter reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        Ok(self.backward_with_inputs(loss, &[])?.0)
    }

    /// As [`Graph::backward`], also returning gradients of the given
    /// [`Graph::input`] leaves (zeros when unreached).
    pub fn backward_with_inputs(&self, loss: Var, inputs: &[Var]) -> Result<(Gradients, Vec<Tensor>)> {
        if self.value(loss).len() != 1 {
            return shape_err(alloc::format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(gout);
                continue;
            }
            self.backward_node(i, &gout, &mut grads)?;
        }
        let mut out = Gradients { grads: (0..self.store.len()).map(|_| None).collect() };
        for (&id, &v) in &self.param_vars {
            if self.nodes[v.0].requires_grad {
                if let Some(g) = grads.get_mut(v.0).and_then(|g| g.take()) {
                    out.grads[id] = Some(g);
                }
            }
        }
        let ins = inputs
            .iter()
            .map(|&v| {
                grads.get(v.0).and_then(|g| g.clone()).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
            })
            .collect();
        Ok((out, ins))
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) -> Result<()> {
        let t = Tensor::from_vec(self.shape(v), data)?;
        self.acc(grads, v, t);
        Ok(())
    }

    fn backward_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = match &self.nodes[i].val {
            Val::Owned(t) => t,
            Val::Param(_) => unreachable!("parameters are leaves"),
        };
        let go = gout.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = go.iter().zip(self.value(*b).data()).map(|(g, v)| g * v).collect();
                    self.acc_data(grads, *a, d)?;
                }
                if self.rg(*b) {
                    let d = go.iter().zip(self.value(*a).data()).map(|(g, v)| g * v).collect();
                    self.acc_data(grads, *b, d)?;
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, gout.map(|v| v * k)),
            Op::Relu(a) => {
                let d = go.iter().zip(y.data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                self.acc_data(grads, *a, d)?;
            }
            Op::Tanh(a) => {
                let d = go.iter().zip(y.data()).map(|(g, v)| g * (1.0 - v * v)).collect();
                self.acc_data(grads, *a, d)?;
            }
            Op::Sigmoid(a) => {
                let d = go.iter().zip(y.data()).map(|(g, v)| g * v * (1.0 - v)).collect();
                self.acc_data(grads, *a, d)?;
            }
            Op::Reshape(a) => self.acc_data(grads, *a, go.to_vec())?,
            Op::Concat { parts, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            d.extend_from_slice(&go[o * total + offset..o * total + offset + w]);
                        }
                        self.acc_data(grads, p, d)?;
                    }
                    offset += w;
                }
            }
            Op::Select { a, axis, indices } => {
                let shape = self.shape(*a);
                let dim = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for (j, &src) in indices.iter().enumerate() {
                        let from = (o * indices.len() + j) * inner;
                        let to = (o * dim + src) * inner;
                        for q in 0..inner {
                            d[to + q] += go[from + q];
                        }
                    }
                }
                self.acc_data(grads, *a, d)?;
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = go.len() / dout;
                if self.rg(*x) {
                    let mut d = vec![0.0; rows * din];
                    gemm(rows, dout, din, go, false, self.value(*w).data(), true, 0.0, &mut d);
                    self.acc_data(grads, *x, d)?;
                }
                if self.rg(*w) {
                    let mut d = vec![0.0; din * dout];
                    gemm(din, rows, dout, self.value(*x).data(), true, go, false, 0.0, &mut d);
                    self.acc_data(grads, *w, d)?;
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.acc_data(grads, *b, col_sums(go, rows, dout))?;
                    }
                }
            }
            Op::Gru { x, w_ih, w_hh, b_ih, b_hh, reverse, cache } => {
                self.gru_backward(*x, *w_ih, *w_hh, *b_ih, *b_hh, *reverse, cache, go, grads)?;
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, c, hi, wi) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let geo = ConvGeom::new(c, hi, wi, k, *stride, *pad);
                let ckk = c * k * k;
                let hw = geo.ho * geo.wo;
                let mut cols = vec![0.0; ckk * hw];
                let mut dw = vec![0.0; o * ckk];
                let mut dx = if self.rg(*x) { vec![0.0; n * c * hi * wi] } else { Vec::new() };
                let mut dcols = vec![0.0; if self.rg(*x) { ckk * hw } else { 0 }];
                let xv = self.value(*x).data();
                for img in 0..n {
                    let g_img = &go[img * o * hw..(img + 1) * o * hw];
                    if self.rg(*w) {
                        geo.im2col(&xv[img * c * hi * wi..(img + 1) * c * hi * wi], &mut cols);
                        gemm(o, hw, ckk, g_img, false, &cols, true, 1.0, &mut dw);
                    }
                    if self.rg(*x) {
                        gemm(ckk, o, hw, self.value(*w).data(), true, g_img, false, 0.0, &mut dcols);
                        geo.col2im(&dcols, &mut dx[img * c * hi * wi..(img + 1) * c * hi * wi]);
                    }
                }
                if self.rg(*w) {
                    self.acc_data(grads, *w, dw)?;
                }
                if self.rg(*x) {
                    self.acc_data(grads, *x, dx)?;
                }
                if self.rg(*b) {
                    self.acc_data(grads, *b, channel_sums(go, n, o, hw))?;
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, cin, hi, wi) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, k) = (ws[1], ws[2]);
                let (ho, wo) = (y.dim(2), y.dim(3));
                let geo = ConvGeom::new(cout, ho, wo, k, *stride, *pad);
                let ckk = cout * k * k;
                let hw = hi * wi;
                let mut cols = vec![0.0; ckk * hw];
                let mut dw = vec![0.0; cin * ckk];
                let mut dx = vec![0.0; if self.rg(*x) { n * cin * hw } else { 0 }];
                let xv = self.value(*x).data();
                for img in 0..n {
                    geo.im2col(&go[img * cout * ho * wo..(img + 1) * cout * ho * wo], &mut cols);
                    if self.rg(*x) {
                        gemm(cin, ckk, hw, self.value(*w).data(), false, &cols, false, 0.0, &mut dx[img * cin * hw..(img + 1) * cin * hw]);
                    }
                    if self.rg(*w) {
                        gemm(cin, hw, ckk, &xv[img * cin * hw..(img + 1) * cin * hw], false, &cols, true, 1.0, &mut dw);
                    }
                }
                if self.rg(*w) {
                    self.acc_data(grads, *w, dw)?;
                }
                if self.rg(*x) {
                    self.acc_data(grads, *x, dx)?;
                }
                if self.rg(*b) {
                    self.acc_data(grads, *b, channel_sums(go, n, cout, ho * wo))?;
                }
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let m = (n * inner) as f64;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for img in 0..n {
                    for ch in 0..c {
                        let s = (img * c + ch) * inner;
                        for q in s..s + inner {
                            dgamma[ch] += go[q] * cache.xhat[q];
                            dbeta[ch] += go[q];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; go.len()];
                    for img in 0..n {
                        for ch in 0..c {
                            let s = (img * c + ch) * inner;
                            let k = gm[ch] * cache.inv_std[ch];
                            for q in s..s + inner {
                                dx[q] = if cache.batch_stats {
                                    k / m * (m * go[q] - dbeta[ch] - cache.xhat[q] * dgamma[ch])
                                } else {
                                    k * go[q]
                                };
                            }
                        }
                    }
                    self.acc_data(grads, *x, dx)?;
                }
                if self.rg(*gamma) {
                    self.acc_data(grads, *gamma, dgamma)?;
                }
                if self.rg(*beta) {
                    self.acc_data(grads, *beta, dbeta)?;
                }
            }
            Op::Sum(a) => {
                let g = go[0];
                let t = Tensor::full(self.shape(*a), g);
                self.acc(grads, *a, t);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let t = Tensor::full(self.shape(*a), go[0] / n);
                self.acc(grads, *a, t);
            }
            Op::L1 { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = go[0] / ta.len() as f64;
                let d: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| {
                        let s = x - y;
                        if s > 0.0 {
                            k
                        } else if s < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.rg(*b) {
                    self.acc_data(grads, *b, d.iter().map(|v| -v).collect())?;
                }
                if self.rg(*a) {
                    self.acc_data(grads, *a, d)?;
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let n = targets.len();
                let s = go[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= s;
                }
                self.acc_data(grads, *logits, d)?;
            }
            Op::Ccc { pred, target } => {
                let p = self.value(*pred);
                let len = *p.shape().last().unwrap();
                let rows = p.len() / len;
                let mut d = vec![0.0; p.len()];
                for r in 0..rows {
                    let yt = &target[r * len..(r + 1) * len];
                    let yp = &p.data()[r * len..(r + 1) * len];
                    let dc = metrics::ccc_grad_wrt_pred(yt, yp)?;
                    // loss = (1 - ccc) / 2, averaged over rows
                    let k = -0.5 * go[0] / rows as f64;
                    for (q, v) in dc.iter().enumerate() {
                        d[r * len + q] = k * v;
                    }
                }
                self.acc_data(grads, *pred, d)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        reverse: bool,
        c: &GruCache,
        go: &[f64],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xs = self.shape(x);
        let (bsz, steps, din) = (xs[0], xs[1], xs[2]);
        let h = self.shape(w_hh)[0];
        let g3 = 3 * h;
        let whh = self.value(w_hh).data();
        let mut dxg = vec![0.0; bsz * steps * g3];
        let mut dhg = vec![0.0; bsz * steps * g3];
        let mut dh = vec![0.0; bsz * h];
        let mut step_hg = vec![0.0; bsz * g3];
        for s in (0..steps).rev() {
            let t = if reverse { steps - 1 - s } else { s };
            for b in 0..bsz {
                let base = (b * steps + t) * h;
                let gbase = (b * steps + t) * g3;
                for j in 0..h {
                    let q = base + j;
                    let g = go[q] + dh[b * h + j];
                    let (r, z, n, ghn, hp) = (c.r[q], c.z[q], c.n[q], c.ghn[q], c.h_prev[q]);
                    let dn = g * (1.0 - z);
                    let dz = g * (hp - n);
                    let dan = dn * (1.0 - n * n);
                    let dar = dan * ghn * r * (1.0 - r);
                    let daz = dz * z * (1.0 - z);
                    dxg[gbase + j] = dar;
                    dxg[gbase + h + j] = daz;
                    dxg[gbase + 2 * h + j] = dan;
                    dhg[gbase + j] = dar;
                    dhg[gbase + h + j] = daz;
                    dhg[gbase + 2 * h + j] = dan * r;
                    dh[b * h + j] = g * z;
                }
                step_hg[b * g3..(b + 1) * g3].copy_from_slice(&dhg[gbase..gbase + g3]);
            }
            gemm(bsz, g3, h, &step_hg, false, whh, true, 1.0, &mut dh);
        }
        let rows = bsz * steps;
        if self.rg(x) {
            let mut d = vec![0.0; rows * din];
            gemm(rows, g3, din, &dxg, false, self.value(w_ih).data(), true, 0.0, &mut d);
            self.acc_data(grads, x, d)?;
        }
        if self.rg(w_ih) {
            let mut d = vec![0.0; din * g3];
            gemm(din, rows, g3, self.value(x).data(), true, &dxg, false, 0.0, &mut d);
            self.acc_data(grads, w_ih, d)?;
        }
        if self.rg(w_hh) {
            let mut d = vec![0.0; h * g3];
            gemm(h, rows, g3, &c.h_prev, true, &dhg, false, 0.0, &mut d);
            self.acc_data(grads, w_hh, d)?;
        }
        if self.rg(b_ih) {
            self.acc_data(grads, b_ih, col_sums(&dxg, rows, g3))?;
        }
        if self.rg(b_hh) {
            self.acc_data(grads, b_hh, col_sums(&dhg, rows, g3))?;
        }
        Ok(())
    }
}

fn col_sums(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for r in 0..rows {
        for (acc, v) in s.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *acc += v;
        }
    }
    s
}

fn channel_sums(m: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for img in 0..n {
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc += m[(img * c + ch) * hw..(img * c + ch + 1) * hw].iter().sum::<f64>();
        }
    }
    s
}

/// Geometry of a square-kernel convolution over a `[c, h, w]` image.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom { c, h, w, k, stride, pad, ho, wo }
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((ch * self.k + ki) * self.k + kj) * hw;
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &img[(ch * self.h + ih as usize) * self.w..(ch * self.h + ih as usize + 1) * self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *d = if iw < 0 || iw >= self.w as isize { 0.0 } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates into `img`.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((ch * self.k + ki) * self.k + kj) * hw;
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let base = (ch * self.h + ih as usize) * self.w;
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.w as isize {
                                img[base + iw as usize] += cols[row + oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}
