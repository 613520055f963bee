//! Parameterised layers. Each layer registers its tensors in a
//! [`ParamStore`] under a dotted name prefix and records its forward pass on
//! a [`Graph`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::Result;
use crate::graph::{BufferUpdate, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(din as f64);
        let w = store.add(&format!("{name}.w"), uniform(&[din, dout], bound, rng), true);
        let b = store.add(&format!("{name}.b"), uniform(&[dout], bound, rng), true);
        Linear { w, b, din, dout }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

/// A single unidirectional GRU layer.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(hidden as f64);
        let w_ih = store.add(&format!("{name}.w_ih"), uniform(&[input, 3 * hidden], bound, rng), true);
        let w_hh = store.add(&format!("{name}.w_hh"), uniform(&[hidden, 3 * hidden], bound, rng), true);
        let b_ih = store.add(&format!("{name}.b_ih"), uniform(&[3 * hidden], bound, rng), true);
        let b_hh = store.add(&format!("{name}.b_hh"), uniform(&[3 * hidden], bound, rng), true);
        Gru { w_ih, w_hh, b_ih, b_hh, input, hidden }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, reverse: bool) -> Result<Var> {
        let (a, b, c, d) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.b_ih), g.param(self.b_hh));
        g.gru(x, a, b, c, d, reverse)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt((cin * k * k) as f64);
        let w = store.add(&format!("{name}.w"), uniform(&[cout, cin, k, k], bound, rng), true);
        let b = store.add(&format!("{name}.b"), uniform(&[cout], bound, rng), true);
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt((cout * k * k) as f64);
        let w = store.add(&format!("{name}.w"), uniform(&[cin, cout, k, k], bound, rng), true);
        let b = store.add(&format!("{name}.b"), uniform(&[cout], bound, rng), true);
        ConvTranspose2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization over channel axis 1 with running statistics kept as
/// non-trainable store entries.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(&format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        let store = g.store();
        let rm = store.get(self.running_mean).data();
        let rv = store.get(self.running_var).data();
        let (y, stats) = g.batch_norm(x, gm, bt, (rm, rv), self.eps)?;
        if let Some((mean, var)) = stats {
            let shape = g.shape(x);
            let count = shape[0] * shape[2..].iter().product::<usize>();
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let m = self.momentum;
            let new_mean: Vec<f64> = rm.iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            let new_var: Vec<f64> = rv.iter().zip(&var).map(|(r, b)| (1.0 - m) * r + m * b * unbias).collect();
            let c = new_mean.len();
            g.record_buffer_update(self.running_mean, Tensor::from_vec(&[c], new_mean)?);
            g.record_buffer_update(self.running_var, Tensor::from_vec(&[c], new_var)?);
        }
        Ok(y)
    }
}

/// Stack of GRU layers, optionally bidirectional (outputs of the two
/// directions are concatenated on the feature axis).
#[derive(Clone, Debug)]
pub struct GruStack {
    pub forward_layers: Vec<Gru>,
    pub backward_layers: Vec<Gru>,
    pub hidden: usize,
}

impl GruStack {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, layers: usize, bidirectional: bool, rng: &mut Rng) -> Self {
        let mut fw = Vec::new();
        let mut bw = Vec::new();
        let width = if bidirectional { 2 * hidden } else { hidden };
        for l in 0..layers {
            let din = if l == 0 { input } else { width };
            let tag: String = if bidirectional { format!("{name}.l{l}.fwd") } else { format!("{name}.l{l}") };
            fw.push(Gru::new(store, &tag, din, hidden, rng));
            if bidirectional {
                bw.push(Gru::new(store, &format!("{name}.l{l}.bwd"), din, hidden, rng));
            }
        }
        GruStack { forward_layers: fw, backward_layers: bw, hidden }
    }

    pub fn is_bidirectional(&self) -> bool {
        !self.backward_layers.is_empty()
    }

    /// Runs every layer; returns the last layer's output together with the
    /// forward and backward halves of that layer.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var, Option<Var>)> {
        let mut cur = x;
        let mut last = (x, x, None);
        for (l, f) in self.forward_layers.iter().enumerate() {
            let fo = f.forward(g, cur, false)?;
            if let Some(b) = self.backward_layers.get(l) {
                let bo = b.forward(g, cur, true)?;
                cur = g.concat(&[fo, bo], 2)?;
                last = (cur, fo, Some(bo));
            } else {
                cur = fo;
                last = (cur, fo, None);
            }
        }
        Ok(last)
    }
}

pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<BufferUpdate>) {
    for u in updates {
        *store.get_mut(u.id) = u.value;
    }
}
