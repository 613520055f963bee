//! Pretext objectives: odd-one-out group construction and loss, L1 frame
//! reconstruction and the weighted multi-task combination.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{assemble_latent, stack, AudioEncoder, EncoderFeatures, OddScorer, PretextModel, VideoTensor};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::signal::{jumble, LogMelSpectrogram, DEFAULT_JUMBLE_FRACTION};
use crate::tensor::Tensor;

pub const DEFAULT_GROUP_SIZE: usize = 4;

/// `K` clips of which exactly one (at `odd_index`) is jumbled.
#[derive(Clone, Debug, PartialEq)]
pub struct OddGroup {
    pub clips: Vec<LogMelSpectrogram>,
    pub odd_index: usize,
    pub jumble_spec: crate::signal::JumbleSpec,
}

/// Partition `batch` into consecutive groups of `k`, jumbling one uniformly
/// chosen member of each. Leftover clips are dropped.
pub fn build_odd_groups(batch: &[LogMelSpectrogram], k: usize, seed: u64) -> Result<Vec<OddGroup>> {
    let mut r = rng::stream(seed, "odd-groups");
    build_odd_groups_with(batch, k, &mut r)
}

pub fn build_odd_groups_with(batch: &[LogMelSpectrogram], k: usize, rng: &mut Rng) -> Result<Vec<OddGroup>> {
    if k < 2 {
        return Err(Error::GroupTooSmall(k));
    }
    if batch.len() < k {
        return Err(Error::BatchTooSmall { batch: batch.len(), group: k });
    }
    batch
        .chunks_exact(k)
        .map(|chunk| {
            let odd_index = rng.random_range(0..k);
            let (jumbled, spec) = jumble(&chunk[odd_index], DEFAULT_JUMBLE_FRACTION, rng)?;
            let mut clips = chunk.to_vec();
            clips[odd_index] = jumbled;
            Ok(OddGroup { clips, odd_index, jumble_spec: spec })
        })
        .collect()
}

/// Scores per clip to `[G, K]` group logits. `summaries: [N, F]`,
/// `members`: row indices into `summaries`, `K` per group.
pub fn odd_group_logits(g: &mut Graph, scorer: &OddScorer, summaries: Var, members: &[usize], k: usize) -> Result<Var> {
    if k < 2 {
        return Err(Error::GroupTooSmall(k));
    }
    if members.is_empty() || members.len() % k != 0 {
        return Err(Error::Shape(format!("{} group members for groups of {k}", members.len())));
    }
    let scores = scorer.forward(g, summaries)?;
    let picked = g.select(scores, 0, members)?;
    g.reshape(picked, &[members.len() / k, k])
}

/// Final-time-step rows of `[N, T, F]` features, as `[N, F]`.
pub fn last_step(g: &mut Graph, feats: Var) -> Result<Var> {
    let s = g.shape(feats).to_vec();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::Shape(format!("expected [N, T, F] features, got {s:?}")));
    }
    let l = g.select(feats, 1, &[s[1] - 1])?;
    g.reshape(l, &[s[0], s[2]])
}

/// Mean cross-entropy of per-group softmax scores against the odd index.
pub fn odd_one_out_loss(store: &ParamStore, encoder: &AudioEncoder, scorer: &OddScorer, groups: &[OddGroup]) -> Result<f64> {
    Ok(odd_one_out_eval(store, encoder, scorer, groups)?.0)
}

/// `(loss, accuracy)` of the odd-one-out task over `groups`.
pub fn odd_one_out_eval(
    store: &ParamStore,
    encoder: &AudioEncoder,
    scorer: &OddScorer,
    groups: &[OddGroup],
) -> Result<(f64, f64)> {
    if groups.is_empty() {
        return Err(Error::Shape("no odd-one-out groups".into()));
    }
    let k = groups[0].clips.len();
    let mut summaries = Vec::new();
    let mut targets = Vec::new();
    for grp in groups {
        if grp.clips.len() != k {
            return Err(Error::Shape("groups of different size".into()));
        }
        for c in &grp.clips {
            let f: EncoderFeatures = encoder.encode(store, c)?;
            summaries.extend_from_slice(f.last());
        }
        targets.push(grp.odd_index);
    }
    let n = groups.len() * k;
    let fdim = summaries.len() / n;
    let mut g = Graph::new(store, false);
    let x = g.constant(Tensor::from_vec(&[n, fdim], summaries)?);
    let members: Vec<usize> = (0..n).collect();
    let logits = odd_group_logits(&mut g, scorer, x, &members, k)?;
    let loss = g.softmax_cross_entropy(logits, &targets)?;
    let acc = group_accuracy(g.value(logits), &targets);
    Ok((g.value(loss).item(), acc))
}

/// Fraction of rows whose arg-max matches the target (first max wins).
pub fn group_accuracy(logits: &Tensor, targets: &[usize]) -> f64 {
    let k = logits.dim(1);
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| argmax(&logits.data()[i * k..(i + 1) * k]) == t)
        .count();
    hits as f64 / targets.len() as f64
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// One reconstruction sample: identity frame, audio and the real video.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconBatch {
    pub still_frame: Tensor,
    pub audio: LogMelSpectrogram,
    pub target_video: VideoTensor,
    pub sampled_frame_index: usize,
}

impl ReconBatch {
    /// Uses frame 0 as the identity input and draws the target frame.
    pub fn new(audio: LogMelSpectrogram, video: VideoTensor, stride: usize, rng: &mut Rng) -> Result<Self> {
        let tv = check_rates(audio.num_frames(), &video, stride)?;
        let s = video.0.shape();
        let fl = s[1] * s[2] * s[3];
        let still = Tensor::from_vec(&s[1..], video.0.data()[..fl].to_vec())?;
        let idx = rng.random_range(0..tv);
        Ok(ReconBatch { still_frame: still, audio, target_video: video, sampled_frame_index: idx })
    }
}

/// Number of video frames implied by `t` audio frames at `stride`, checked
/// against the video.
pub fn check_rates(t: usize, video: &VideoTensor, stride: usize) -> Result<usize> {
    let tv = t.div_ceil(stride);
    let s = video.0.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::Shape(format!("video must be [T_v, 3, H, W], got {s:?}")));
    }
    if s[0] != tv {
        return Err(Error::Alignment(format!("{t} audio frames need {tv} video frames, got {}", s[0])));
    }
    Ok(tv)
}

/// Decode only the frame at `frame_idx[b]` of each sample.
///
/// `z_aud: [B, T, F]`, `still: [B, 3, H, W]`, `noise: [B, T_v, N]` raw draws.
/// Returns `[B, 3, H, W]`.
pub fn decode_sampled_frames(
    g: &mut Graph,
    model: &PretextModel,
    z_aud: Var,
    still: Var,
    noise: Var,
    frame_idx: &[usize],
) -> Result<Var> {
    let (z_id, skips) = model.identity.forward(g, still)?;
    let z_n = model.noise.forward(g, noise)?;
    let latent = assemble_latent(g, z_aud, z_id, z_n, model.cfg.video_stride)?;
    let ls = g.shape(latent).to_vec();
    let (b, tv, l) = (ls[0], ls[1], ls[2]);
    if frame_idx.len() != b || frame_idx.iter().any(|&i| i >= tv) {
        return Err(Error::Shape(format!("frame indices {frame_idx:?} for {b} clips of {tv} frames")));
    }
    let flat = g.reshape(latent, &[b * tv, l])?;
    let rows: Vec<usize> = frame_idx.iter().enumerate().map(|(i, &f)| i * tv + f).collect();
    let code = g.select(flat, 0, &rows)?;
    model.decoder.forward(g, code, &skips)
}

/// Mean absolute pixel error between the generated and the real frame at
/// the sampled index. Normalization layers run in inference mode.
pub fn l1_reconstruction_loss(store: &ParamStore, model: &PretextModel, batch: &ReconBatch, seed: u64) -> Result<f64> {
    let stride = model.cfg.video_stride;
    let tv = check_rates(batch.audio.num_frames(), &batch.target_video, stride)?;
    if batch.sampled_frame_index >= tv {
        return Err(Error::Shape(format!("sampled frame {} of {tv}", batch.sampled_frame_index)));
    }
    let mut g = Graph::new(store, false);
    let (gen, target) = recon_pair(&mut g, model, batch, seed)?;
    let l = g.l1_loss(gen, target)?;
    Ok(g.value(l).item())
}

/// Generated and real sampled frame for one [`ReconBatch`], both `[1, 3, H, W]`.
pub fn recon_pair(g: &mut Graph, model: &PretextModel, batch: &ReconBatch, seed: u64) -> Result<(Var, Var)> {
    let stride = model.cfg.video_stride;
    let tv = check_rates(batch.audio.num_frames(), &batch.target_video, stride)?;
    let audio = stack(&[batch.audio.frames()])?;
    let a = g.constant(audio);
    let z_aud = model.audio.forward(g, a)?;
    let mut sshape = vec![1];
    sshape.extend_from_slice(batch.still_frame.shape());
    let still = g.constant(batch.still_frame.clone().reshape(&sshape)?);
    let raw = model.noise.sample(1, tv, &mut rng::stream(seed, "noise"));
    let noise = g.constant(raw);
    let gen = decode_sampled_frames(g, model, z_aud, still, noise, &[batch.sampled_frame_index])?;
    let s = batch.target_video.0.shape();
    let fl = s[1] * s[2] * s[3];
    let i = batch.sampled_frame_index;
    let target = Tensor::from_vec(&[1, s[1], s[2], s[3]], batch.target_video.0.data()[i * fl..(i + 1) * fl].to_vec())?;
    let t = g.constant(target);
    Ok((gen, t))
}

/// Weight of the video loss in the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskWeights {
    pub alpha: f64,
}

impl MultiTaskWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidWeight(alpha));
        }
        Ok(MultiTaskWeights { alpha })
    }
}

/// `alpha * l_video + (1 - alpha) * l_audio`.
pub fn multitask_loss(l_video: f64, l_audio: f64, w: MultiTaskWeights) -> Result<f64> {
    let a = MultiTaskWeights::new(w.alpha)?.alpha;
    if !l_video.is_finite() || !l_audio.is_finite() {
        return Err(Error::NonFinite(format!("pretext losses {l_video}, {l_audio}")));
    }
    Ok(a * l_video + (1.0 - a) * l_audio)
}

/// Graph form of [`multitask_loss`].
pub fn multitask_loss_var(g: &mut Graph, l_video: Var, l_audio: Var, w: MultiTaskWeights) -> Result<Var> {
    let a = MultiTaskWeights::new(w.alpha)?.alpha;
    let v = g.scale(l_video, a);
    let o = g.scale(l_audio, 1.0 - a);
    g.add(v, o)
}
