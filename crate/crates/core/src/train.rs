//! Optimisation: Adam, learning-rate schedules, self-supervised
//! pretraining, feature extraction and downstream training in frozen,
//! finetune and scratch modes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticClip;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::metrics::{self, RunReport};
use crate::models::{
    stack, AudioEncoder, AudioEncoderConfig, BgruClassifier, BgruConfig, BgruRegressor, PretextModel,
    PretextModelConfig, VideoTensor, AUDIO_ENCODER,
};
use crate::nn::apply_buffer_updates;
use crate::params::ParamStore;
use crate::pretext::{
    argmax, decode_sampled_frames, group_accuracy, last_step, multitask_loss_var, odd_group_logits, MultiTaskWeights,
    DEFAULT_GROUP_SIZE,
};
use crate::rng::{self, Rng};
use crate::signal::{jumble_rows, JumbleSpec, DEFAULT_JUMBLE_FRACTION, N_MELS};
use crate::tensor::Tensor;

// ---- optimiser -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Update every trainable entry that has a gradient. Returns the number
    /// of tensors touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> usize {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let mut touched = 0;
        for id in 0..store.len() {
            let Some(g) = grads.get(id) else { continue };
            if !store.entry(id).trainable {
                continue;
            }
            let n = g.len();
            let m = self.m[id].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id].get_or_insert_with(|| vec![0.0; n]);
            let p = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / bc1) / (libm::sqrt(v[i] / bc2) + self.eps);
            }
            touched += 1;
        }
        touched
    }
}

// ---- schedules ---------------------------------------------------------------------

/// Step decay: `lr0 * decay^floor(epoch / every)`.
fn step_decay(lr0: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    lr0 * libm::pow(decay, (epoch / every) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        PretrainSchedule { lr0: 0.06, decay: 0.98, decay_every: 10, epochs: 100, batch_size: 32 }
    }
}

impl PretrainSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        step_decay(self.lr0, self.decay, self.decay_every, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        validate_schedule(self.lr0, self.decay, self.decay_every, self.epochs, self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for DownstreamSchedule {
    fn default() -> Self {
        DownstreamSchedule { lr0: 1e-4, decay: 0.1, decay_every: 40, epochs: 100, batch_size: 64 }
    }
}

impl DownstreamSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        step_decay(self.lr0, self.decay, self.decay_every, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        validate_schedule(self.lr0, self.decay, self.decay_every, self.epochs, self.batch_size)
    }
}

fn validate_schedule(lr0: f64, decay: f64, every: usize, epochs: usize, batch: usize) -> Result<()> {
    if !(lr0 > 0.0 && lr0.is_finite()) || !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::Config(format!("learning rate {lr0} / decay {decay} out of range")));
    }
    if every == 0 || epochs == 0 || batch == 0 {
        return Err(Error::Config("decay interval, epochs and batch size must be positive".into()));
    }
    Ok(())
}

// ---- pretraining -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PretextTask {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "odd")]
    Odd,
    #[serde(rename = "l1+odd")]
    L1Odd,
}

impl PretextTask {
    pub fn name(self) -> &'static str {
        match self {
            PretextTask::L1 => "l1",
            PretextTask::Odd => "odd",
            PretextTask::L1Odd => "l1+odd",
        }
    }

    pub fn needs_video(self) -> bool {
        self != PretextTask::Odd
    }

    pub fn uses_odd(self) -> bool {
        self != PretextTask::L1
    }
}

/// Frames of a clip's video, produced on request.
pub trait VideoSource {
    fn num_frames(&self) -> usize;
    fn frame(&self, j: usize) -> Result<Tensor>;
}

impl VideoSource for SyntheticClip {
    fn num_frames(&self) -> usize {
        self.num_video_frames()
    }

    fn frame(&self, j: usize) -> Result<Tensor> {
        if j >= self.num_video_frames() {
            return Err(Error::Shape(format!("frame {j} of {}", self.num_video_frames())));
        }
        Ok(SyntheticClip::frame(self, j))
    }
}

impl VideoSource for VideoTensor {
    fn num_frames(&self) -> usize {
        self.0.dim(0)
    }

    fn frame(&self, j: usize) -> Result<Tensor> {
        let s = self.0.shape();
        if j >= s[0] {
            return Err(Error::Shape(format!("frame {j} of {}", s[0])));
        }
        let fl = s[1] * s[2] * s[3];
        Tensor::from_vec(&s[1..], self.0.data()[j * fl..(j + 1) * fl].to_vec())
    }
}

/// One pretraining clip: `[t, 80]` log-mel frames and, for the
/// reconstruction task, its video.
#[derive(Clone, Copy)]
pub struct PretrainItem<'a> {
    pub mel: &'a Tensor,
    pub video: Option<&'a dyn VideoSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub task: PretextTask,
    pub alpha: f64,
    pub model: PretextModelConfig,
    pub schedule: PretrainSchedule,
    pub group_size: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(task: PretextTask, model: PretextModelConfig, schedule: PretrainSchedule, seed: u64) -> Self {
        PretrainConfig { task, alpha: 0.67, model, schedule, group_size: DEFAULT_GROUP_SIZE, seed }
    }

    pub fn validate(&self) -> Result<()> {
        MultiTaskWeights::new(self.alpha)?;
        self.model.validate()?;
        self.schedule.validate()?;
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if self.task.uses_odd() && self.schedule.batch_size < self.group_size {
            return Err(Error::BatchTooSmall { batch: self.schedule.batch_size, group: self.group_size });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub l1: Option<f64>,
    pub odd: Option<f64>,
    pub odd_accuracy: Option<f64>,
}

pub struct Pretrained {
    pub model: PretextModel,
    pub store: ParamStore,
    pub history: Vec<EpochStats>,
}

fn check_items(items: &[PretrainItem], task: PretextTask, stride: usize) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Shape("no pretraining clips".into()));
    }
    for (i, it) in items.iter().enumerate() {
        let s = it.mel.shape();
        if s.len() != 2 || s[1] != N_MELS || s[0] == 0 {
            return Err(Error::Shape(format!("clip {i}: expected [t, {N_MELS}] log-mel, got {s:?}")));
        }
        if task.needs_video() {
            let v = it
                .video
                .ok_or_else(|| Error::MissingModality(format!("clip {i} has no video but task '{}' needs it", task.name())))?;
            let need = s[0].div_ceil(stride);
            if v.num_frames() != need {
                return Err(Error::Alignment(format!("clip {i}: {} audio frames need {need} video frames, got {}", s[0], v.num_frames())));
            }
        }
    }
    Ok(())
}

/// First `t` rows of a `[T, d]` tensor.
fn crop_rows(x: &Tensor, t: usize) -> Tensor {
    let d = x.dim(1);
    Tensor::from_vec(&[t, d], x.data()[..t * d].to_vec()).expect("crop within bounds")
}

struct StepOut {
    total: f64,
    l1: Option<f64>,
    odd: Option<f64>,
    odd_hits: usize,
    groups: usize,
}

struct StepRngs {
    groups: Rng,
    frames: Rng,
    noise: Rng,
}

fn pretrain_step(
    store: &mut ParamStore,
    model: &PretextModel,
    cfg: &PretrainConfig,
    batch: &[PretrainItem],
    rngs: &mut StepRngs,
    adam: &mut Adam,
    lr: f64,
) -> Result<StepOut> {
    let t = batch.iter().map(|b| b.mel.dim(0)).min().expect("non-empty batch");
    let b = batch.len();
    let k = cfg.group_size;
    let n_groups = if cfg.task.uses_odd() { b / k } else { 0 };
    let mut rows: Vec<Tensor> = batch.iter().map(|it| crop_rows(it.mel, t)).collect();
    let mut odd_idx = Vec::with_capacity(n_groups);
    for gi in 0..n_groups {
        let o = rngs.groups.random_range(0..k);
        let spec = JumbleSpec::random(t, DEFAULT_JUMBLE_FRACTION, &mut rngs.groups)?;
        rows.push(jumble_rows(&rows[gi * k + o], &spec)?);
        odd_idx.push(o);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    let input = stack(&refs)?;

    let (loss_val, l1_val, odd_val, hits, buffers, grads) = {
        let mut g = Graph::new(store, true);
        let x = g.constant(input);
        let feats = model.audio.forward(&mut g, x)?;

        let mut odd_loss = None;
        let mut hits = 0;
        if n_groups > 0 {
            let summ = last_step(&mut g, feats)?;
            let mut members = Vec::with_capacity(n_groups * k);
            for (gi, &o) in odd_idx.iter().enumerate() {
                for j in 0..k {
                    members.push(if j == o { b + gi } else { gi * k + j });
                }
            }
            let logits = odd_group_logits(&mut g, &model.scorer, summ, &members, k)?;
            let l = g.softmax_cross_entropy(logits, &odd_idx)?;
            hits = libm::round(group_accuracy(g.value(logits), &odd_idx) * n_groups as f64) as usize;
            odd_loss = Some(l);
        }

        let mut l1_loss = None;
        if cfg.task.needs_video() {
            let z_aud = if n_groups > 0 { g.select(feats, 0, &(0..b).collect::<Vec<_>>())? } else { feats };
            let stride = model.cfg.video_stride;
            let tv = t.div_ceil(stride);
            let mut stills = Vec::with_capacity(b);
            let mut targets = Vec::with_capacity(b);
            let mut idx = Vec::with_capacity(b);
            for it in batch {
                let v = it.video.expect("checked");
                let j = rngs.frames.random_range(0..tv);
                stills.push(v.frame(0)?);
                targets.push(v.frame(j)?);
                idx.push(j);
            }
            let still = g.constant(stack(&stills.iter().collect::<Vec<_>>())?);
            let target = g.constant(stack(&targets.iter().collect::<Vec<_>>())?);
            let noise = g.constant(model.noise.sample(b, tv, &mut rngs.noise));
            let gen = decode_sampled_frames(&mut g, model, z_aud, still, noise, &idx)?;
            l1_loss = Some(g.l1_loss(gen, target)?);
        }

        let total = match (cfg.task, l1_loss, odd_loss) {
            (PretextTask::L1, Some(l), _) => l,
            (PretextTask::Odd, _, Some(o)) => o,
            (PretextTask::L1Odd, Some(l), Some(o)) => multitask_loss_var(&mut g, l, o, MultiTaskWeights::new(cfg.alpha)?)?,
            _ => return Err(Error::BatchTooSmall { batch: b, group: k }),
        };
        let lv = g.value(total).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss {lv}")));
        }
        let grads = g.backward(total)?;
        let l1v = l1_loss.map(|v| g.value(v).item());
        let oddv = odd_loss.map(|v| g.value(v).item());
        (lv, l1v, oddv, hits, g.take_buffer_updates(), grads)
    };
    if !grads.max_abs().is_finite() {
        return Err(Error::NonFinite("pretraining gradient".into()));
    }
    adam.step(store, &grads, lr);
    apply_buffer_updates(store, buffers);
    Ok(StepOut { total: loss_val, l1: l1_val, odd: odd_val, odd_hits: hits, groups: n_groups })
}

/// Train all pretext sub-networks. `on_epoch` observes each epoch's mean
/// losses as they complete.
pub fn pretrain(items: &[PretrainItem], cfg: &PretrainConfig, on_epoch: &mut dyn FnMut(&EpochStats)) -> Result<Pretrained> {
    cfg.validate()?;
    check_items(items, cfg.task, cfg.model.video_stride)?;
    let (model, mut store) = PretextModel::new(&cfg.model, rng::derive_str(cfg.seed, "init"))?;
    let mut adam = Adam::new();
    let mut history = Vec::with_capacity(cfg.schedule.epochs);
    let bs = cfg.schedule.batch_size;
    let min_batch = if cfg.task.uses_odd() { cfg.group_size } else { 1 };
    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr(epoch);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("shuffle-{epoch}")));
        let mut rngs = StepRngs {
            groups: rng::stream(cfg.seed, &format!("groups-{epoch}")),
            frames: rng::stream(cfg.seed, &format!("frames-{epoch}")),
            noise: rng::stream(cfg.seed, &format!("noise-{epoch}")),
        };
        let (mut tot, mut l1, mut odd, mut hits, mut groups, mut steps) = (0.0, 0.0, 0.0, 0, 0, 0);
        for chunk in order.chunks(bs) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch: Vec<PretrainItem> = chunk.iter().map(|&i| items[i]).collect();
            let out = pretrain_step(&mut store, &model, cfg, &batch, &mut rngs, &mut adam, lr)?;
            tot += out.total;
            l1 += out.l1.unwrap_or(0.0);
            odd += out.odd.unwrap_or(0.0);
            hits += out.odd_hits;
            groups += out.groups;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::BatchTooSmall { batch: items.len(), group: min_batch });
        }
        let n = steps as f64;
        let stats = EpochStats {
            epoch,
            lr,
            total: tot / n,
            l1: cfg.task.needs_video().then_some(l1 / n),
            odd: cfg.task.uses_odd().then_some(odd / n),
            odd_accuracy: (groups > 0).then(|| hits as f64 / groups as f64),
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(Pretrained { model, store, history })
}

/// Odd-one-out `(loss, accuracy)` on groups of `k` consecutive clips, each
/// with one member jumbled. Inference mode.
pub fn odd_eval(store: &ParamStore, model: &PretextModel, mels: &[&Tensor], k: usize, seed: u64) -> Result<(f64, f64)> {
    if k < 2 {
        return Err(Error::GroupTooSmall(k));
    }
    if mels.len() < k {
        return Err(Error::BatchTooSmall { batch: mels.len(), group: k });
    }
    let mut r = rng::stream(seed, "odd-eval");
    let mut loss_sum = 0.0;
    let mut hits = 0.0;
    let mut n_groups = 0;
    for chunk in mels.chunks_exact(k) {
        let t = chunk.iter().map(|m| m.dim(0)).min().expect("k >= 2");
        let mut rows: Vec<Tensor> = chunk.iter().map(|m| crop_rows(m, t)).collect();
        let o = r.random_range(0..k);
        let spec = JumbleSpec::random(t, DEFAULT_JUMBLE_FRACTION, &mut r)?;
        rows[o] = jumble_rows(&rows[o], &spec)?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        let mut g = Graph::new(store, false);
        let x = g.constant(stack(&refs)?);
        let f = model.audio.forward(&mut g, x)?;
        let s = last_step(&mut g, f)?;
        let members: Vec<usize> = (0..k).collect();
        let logits = odd_group_logits(&mut g, &model.scorer, s, &members, k)?;
        let l = g.softmax_cross_entropy(logits, &[o])?;
        loss_sum += g.value(l).item();
        hits += group_accuracy(g.value(logits), &[o]);
        n_groups += 1;
    }
    Ok((loss_sum / n_groups as f64, hits / n_groups as f64))
}

/// Mean L1 reconstruction error over `items` with a fixed frame choice per
/// clip. Inference mode.
pub fn l1_eval(store: &ParamStore, model: &PretextModel, items: &[PretrainItem], seed: u64) -> Result<f64> {
    check_items(items, PretextTask::L1, model.cfg.video_stride)?;
    let mut r = rng::stream(seed, "l1-eval");
    let mut total = 0.0;
    for (i, it) in items.iter().enumerate() {
        let t = it.mel.dim(0);
        let tv = t.div_ceil(model.cfg.video_stride);
        let v = it.video.expect("checked");
        let j = r.random_range(0..tv);
        let mut g = Graph::new(store, false);
        let x = g.constant(stack(&[it.mel])?);
        let z = model.audio.forward(&mut g, x)?;
        let f0 = v.frame(0)?;
        let still = g.constant(stack(&[&f0])?);
        let tgt = v.frame(j)?;
        let target = g.constant(stack(&[&tgt])?);
        let noise = g.constant(model.noise.sample(1, tv, &mut rng::stream(seed, &format!("l1-eval-noise-{i}"))));
        let gen = decode_sampled_frames(&mut g, model, z, still, noise, &[j])?;
        let l = g.l1_loss(gen, target)?;
        total += g.value(l).item();
    }
    Ok(total / items.len() as f64)
}

/// Encoder features for each `[t, 80]` input, batching equal lengths.
pub fn extract_features(store: &ParamStore, encoder: &AudioEncoder, mels: &[&Tensor]) -> Result<Vec<Tensor>> {
    let mut out: Vec<Option<Tensor>> = vec![None; mels.len()];
    let mut order: Vec<usize> = (0..mels.len()).collect();
    order.sort_by_key(|&i| mels[i].dim(0));
    let mut start = 0;
    while start < order.len() {
        let t = mels[order[start]].dim(0);
        let mut end = start;
        while end < order.len() && end - start < 32 && mels[order[end]].dim(0) == t {
            end += 1;
        }
        let batch: Vec<&Tensor> = order[start..end].iter().map(|&i| mels[i]).collect();
        for (f, &i) in encoder.encode_batch(store, &batch)?.into_iter().zip(&order[start..end]) {
            out[i] = Some(f.0);
        }
        start = end;
    }
    Ok(out.into_iter().map(|t| t.expect("every clip encoded")).collect())
}

// ---- downstream --------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Frozen,
    Finetune,
    Scratch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DownstreamTask {
    Classify { classes: usize },
    Regress,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[t, d]` encoder features or `[t, 80]` log-mel frames.
    pub input: Tensor,
    pub label: Option<usize>,
    pub target: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DownstreamData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// What sits in front of the downstream head.
#[derive(Clone, Copy)]
pub enum Frontend<'a> {
    /// Inputs already are encoder features.
    Features,
    /// Inputs are log-mel frames fed through an audio encoder, initialised
    /// from `init` or randomly when `init` is `None`.
    Encoder { cfg: &'a AudioEncoderConfig, init: Option<&'a ParamStore> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub bgru: BgruConfig,
    pub schedule: DownstreamSchedule,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DownstreamOutcome {
    /// Validation metric after every epoch.
    pub val_trace: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Macro-F1 or CCC on the test split, from the best-validation model.
    pub test_metric: f64,
    pub test_accuracy: Option<f64>,
    /// Encoder digest before and after training, when an encoder was involved.
    pub encoder_digest: Option<(String, String)>,
    pub store: ParamStore,
    task: DownstreamTask,
    net: Net,
    frozen: Option<(AudioEncoder, ParamStore)>,
}

impl DownstreamOutcome {
    /// `(metric, accuracy)` of the selected model on `xs`, given in the same
    /// form as the training inputs.
    pub fn evaluate(&self, xs: &[Example]) -> Result<(f64, Option<f64>)> {
        check_split("eval", xs, self.task, true)?;
        match &self.frozen {
            Some((enc, st)) => evaluate(&self.store, &self.net, &encode_examples(st, enc, xs)?, self.task),
            None => evaluate(&self.store, &self.net, xs, self.task),
        }
    }
}

fn encode_examples(store: &ParamStore, enc: &AudioEncoder, xs: &[Example]) -> Result<Vec<Example>> {
    let mels: Vec<&Tensor> = xs.iter().map(|e| &e.input).collect();
    let feats = extract_features(store, enc, &mels)?;
    Ok(xs.iter().zip(feats).map(|(e, f)| Example { input: f, ..e.clone() }).collect())
}

#[derive(Clone, Debug)]
enum Head {
    Cls(BgruClassifier),
    Reg(BgruRegressor),
}

impl Head {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Head::Cls(h) => h.forward(g, x),
            Head::Reg(h) => h.forward(g, x),
        }
    }
}

#[derive(Clone, Debug)]
struct Net {
    encoder: Option<AudioEncoder>,
    head: Head,
}

impl Net {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = match &self.encoder {
            Some(e) => e.forward(g, x)?,
            None => x,
        };
        self.head.forward(g, h)
    }
}

fn check_split(name: &str, xs: &[Example], task: DownstreamTask, all: bool) -> Result<Vec<usize>> {
    let has = |e: &Example| match task {
        DownstreamTask::Classify { .. } => e.label.is_some(),
        DownstreamTask::Regress => e.target.is_some(),
    };
    let keep: Vec<usize> = (0..xs.len()).filter(|&i| has(&xs[i])).collect();
    if keep.is_empty() || (all && keep.len() != xs.len()) {
        return Err(Error::MissingLabels(format!("{name} split has {} of {} labelled clips", keep.len(), xs.len())));
    }
    for &i in &keep {
        let e = &xs[i];
        if e.input.ndim() != 2 || e.input.dim(0) == 0 {
            return Err(Error::Shape(format!("{name} clip {i}: input {:?}", e.input.shape())));
        }
        match task {
            DownstreamTask::Classify { classes } => {
                let l = e.label.expect("filtered");
                if l >= classes {
                    return Err(Error::Label(format!("{name} clip {i}: label {l} outside [0, {classes})")));
                }
            }
            DownstreamTask::Regress => {
                let n = e.target.as_ref().expect("filtered").len();
                if n != e.input.dim(0) {
                    return Err(Error::Alignment(format!("{name} clip {i}: {n} targets for {} frames", e.input.dim(0))));
                }
            }
        }
    }
    Ok(keep)
}

/// Equal-length buckets of `idx`, in first-appearance order.
fn buckets(xs: &[Example], idx: &[usize]) -> Vec<Vec<usize>> {
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in idx {
        let t = xs[i].input.dim(0);
        match out.iter_mut().find(|(l, _)| *l == t) {
            Some((_, v)) => v.push(i),
            None => out.push((t, vec![i])),
        }
    }
    out.into_iter().map(|(_, v)| v).collect()
}

fn batch_input(xs: &[Example], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &xs[i].input).collect();
    stack(&refs)
}

/// Predictions for every example: class ids or per-step values.
fn predict(store: &ParamStore, net: &Net, xs: &[Example], task: DownstreamTask) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut cls = vec![0; xs.len()];
    let mut reg = vec![Vec::new(); xs.len()];
    let all: Vec<usize> = (0..xs.len()).collect();
    for bucket in buckets(xs, &all) {
        for chunk in bucket.chunks(64) {
            let mut g = Graph::new(store, false);
            let x = g.constant(batch_input(xs, chunk)?);
            let y = net.forward(&mut g, x)?;
            let out = g.value(y);
            let w = out.dim(1);
            for (r, &i) in chunk.iter().enumerate() {
                let row = &out.data()[r * w..(r + 1) * w];
                match task {
                    DownstreamTask::Classify { .. } => cls[i] = argmax(row),
                    DownstreamTask::Regress => reg[i] = row.to_vec(),
                }
            }
        }
    }
    Ok((cls, reg))
}

/// `(metric, accuracy)`: macro-F1 and accuracy, or CCC over the
/// concatenated sequences.
fn evaluate(store: &ParamStore, net: &Net, xs: &[Example], task: DownstreamTask) -> Result<(f64, Option<f64>)> {
    let (cls, reg) = predict(store, net, xs, task)?;
    match task {
        DownstreamTask::Classify { classes } => {
            let truth: Vec<usize> = xs.iter().map(|e| e.label.expect("checked")).collect();
            Ok((metrics::macro_f1(&cls, &truth, classes)?, Some(metrics::accuracy(&cls, &truth)?)))
        }
        DownstreamTask::Regress => {
            let y: Vec<f64> = xs.iter().flat_map(|e| e.target.clone().expect("checked")).collect();
            let p: Vec<f64> = reg.into_iter().flatten().collect();
            Ok((metrics::ccc(&y, &p)?.ccc, None))
        }
    }
}

/// Train a downstream head and return the model of the best validation
/// epoch (earliest on ties) with its test metric.
pub fn train_downstream(
    task: DownstreamTask,
    data: &DownstreamData,
    mode: Mode,
    frontend: Frontend,
    cfg: &DownstreamConfig,
) -> Result<DownstreamOutcome> {
    cfg.schedule.validate()?;
    if let DownstreamTask::Classify { classes } = task {
        if classes < 2 {
            return Err(Error::Config(format!("classification needs at least 2 classes, got {classes}")));
        }
    }
    check_split("train", &data.train, task, false)?;
    check_split("val", &data.val, task, true)?;
    check_split("test", &data.test, task, true)?;
    match (mode, frontend) {
        (Mode::Frozen, Frontend::Features) => fit(task, data, None, cfg),
        (Mode::Frozen, Frontend::Encoder { cfg: ecfg, init: Some(src) }) => {
            // Features are computed once; the head then trains on them.
            let (enc, store) = encoder_from(ecfg, src)?;
            let before = store.digest(AUDIO_ENCODER);
            let extract = |xs: &[Example]| encode_examples(&store, &enc, xs);
            let feats = DownstreamData { train: extract(&data.train)?, val: extract(&data.val)?, test: extract(&data.test)? };
            let mut out = fit(task, &feats, None, cfg)?;
            let after = store.digest(AUDIO_ENCODER);
            if after != before || before != src.digest(AUDIO_ENCODER) {
                return Err(Error::ModeViolation("frozen encoder parameters changed".into()));
            }
            out.encoder_digest = Some((before, after));
            out.frozen = Some((enc, store));
            Ok(out)
        }
        (Mode::Frozen, Frontend::Encoder { init: None, .. }) => {
            Err(Error::ModeViolation("frozen mode needs a pretrained encoder".into()))
        }
        (Mode::Finetune, Frontend::Encoder { cfg: ecfg, init: Some(src) }) => fit(task, data, Some((ecfg, Some(src))), cfg),
        (Mode::Finetune, _) => Err(Error::ModeViolation("finetune mode needs a pretrained encoder and log-mel inputs".into())),
        (Mode::Scratch, Frontend::Encoder { cfg: ecfg, init: None }) => fit(task, data, Some((ecfg, None)), cfg),
        (Mode::Scratch, Frontend::Encoder { init: Some(_), .. }) => {
            Err(Error::ModeViolation("scratch mode must not load encoder weights".into()))
        }
        (Mode::Scratch, Frontend::Features) => {
            Err(Error::ModeViolation("scratch mode trains its own encoder and needs log-mel inputs".into()))
        }
    }
}

fn encoder_from(cfg: &AudioEncoderConfig, src: &ParamStore) -> Result<(AudioEncoder, ParamStore)> {
    let mut store = ParamStore::new();
    let enc = AudioEncoder::new(&mut store, cfg, &mut rng::from_seed(0));
    store.copy_prefix_from(src, AUDIO_ENCODER)?;
    Ok((enc, store))
}

fn fit(
    task: DownstreamTask,
    data: &DownstreamData,
    encoder: Option<(&AudioEncoderConfig, Option<&ParamStore>)>,
    cfg: &DownstreamConfig,
) -> Result<DownstreamOutcome> {
    let train_idx = check_split("train", &data.train, task, false)?;
    let mut store = ParamStore::new();
    let enc = match encoder {
        Some((ecfg, init)) => {
            let e = AudioEncoder::new(&mut store, ecfg, &mut rng::stream(cfg.seed, "encoder-init"));
            if let Some(src) = init {
                store.copy_prefix_from(src, AUDIO_ENCODER)?;
            }
            Some(e)
        }
        None => None,
    };
    let in_dim = match &enc {
        Some(e) => {
            let w = data.train[train_idx[0]].input.dim(1);
            if w != e.cfg.n_mels {
                return Err(Error::Shape(format!("encoder expects {} mel bins, inputs have {w}", e.cfg.n_mels)));
            }
            e.cfg.feature_dim
        }
        None => data.train[train_idx[0]].input.dim(1),
    };
    let mut hr = rng::stream(cfg.seed, "head-init");
    let head = match task {
        DownstreamTask::Classify { classes } => Head::Cls(BgruClassifier::new(&mut store, in_dim, classes, &cfg.bgru, &mut hr)),
        DownstreamTask::Regress => Head::Reg(BgruRegressor::new(&mut store, in_dim, &cfg.bgru, &mut hr)),
    };
    let net = Net { encoder: enc, head };
    let digest_before = net.encoder.as_ref().map(|_| store.digest(AUDIO_ENCODER));

    let mut adam = Adam::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut val_trace = Vec::with_capacity(cfg.schedule.epochs);
    let mut train_loss = Vec::with_capacity(cfg.schedule.epochs);
    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("downstream-shuffle-{epoch}")));
        let (mut loss_sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.schedule.batch_size) {
            let (lv, grads) = {
                let mut g = Graph::new(&store, true);
                let mut terms = Vec::new();
                for bucket in buckets(&data.train, chunk) {
                    let x = g.constant(batch_input(&data.train, &bucket)?);
                    let y = net.forward(&mut g, x)?;
                    let l = match task {
                        DownstreamTask::Classify { .. } => {
                            let t: Vec<usize> = bucket.iter().map(|&i| data.train[i].label.expect("checked")).collect();
                            g.softmax_cross_entropy(y, &t)?
                        }
                        DownstreamTask::Regress => {
                            let t: Vec<f64> =
                                bucket.iter().flat_map(|&i| data.train[i].target.clone().expect("checked")).collect();
                            g.ccc_loss(y, &t)?
                        }
                    };
                    terms.push(g.scale(l, bucket.len() as f64 / chunk.len() as f64));
                }
                let mut total = terms[0];
                for &t in &terms[1..] {
                    total = g.add(total, t)?;
                }
                let lv = g.value(total).item();
                if !lv.is_finite() {
                    return Err(Error::NonFinite(format!("downstream loss {lv} at epoch {epoch}")));
                }
                (lv, g.backward(total)?)
            };
            adam.step(&mut store, &grads, lr);
            loss_sum += lv;
            batches += 1;
        }
        train_loss.push(loss_sum / batches as f64);
        let (v, _) = evaluate(&store, &net, &data.val, task)?;
        val_trace.push(v);
        if best.as_ref().is_none_or(|(_, b, _)| v > *b) {
            best = Some((epoch, v, store.clone()));
        }
    }
    let digest_after = net.encoder.as_ref().map(|_| store.digest(AUDIO_ENCODER));
    let (best_epoch, best_val, best_store) = best.expect("at least one epoch");
    let (test_metric, test_accuracy) = evaluate(&best_store, &net, &data.test, task)?;
    Ok(DownstreamOutcome {
        val_trace,
        train_loss,
        best_epoch,
        best_val,
        test_metric,
        test_accuracy,
        encoder_digest: digest_before.zip(digest_after),
        store: best_store,
        task,
        net,
        frozen: None,
    })
}

/// Repeat `run` with per-run seeds derived from `master_seed`.
pub fn run_repeated(
    metric_name: &str,
    n_runs: usize,
    master_seed: u64,
    mut run: impl FnMut(u64) -> Result<f64>,
) -> Result<RunReport> {
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n_runs as u64).map(|i| rng::derive(master_seed, i)).collect();
    let values = seeds.iter().map(|&s| run(s)).collect::<Result<Vec<f64>>>()?;
    Ok(RunReport::new(metric_name, values, seeds))
}
