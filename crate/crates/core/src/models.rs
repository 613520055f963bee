//! Network components: the recurrent audio encoder, the convolutional
//! identity encoder, the temporally coherent noise generator, the U-Net style
//! frame decoder, the odd-one-out scorer and the bidirectional GRU heads used
//! downstream.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm, Conv2d, ConvTranspose2d, GruStack, Linear};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::signal::{LogMelSpectrogram, N_MELS};
use crate::tensor::Tensor;

pub const AUDIO_ENCODER: &str = "audio_encoder";
pub const IDENTITY_ENCODER: &str = "identity_encoder";
pub const NOISE_GENERATOR: &str = "noise_generator";
pub const FRAME_DECODER: &str = "frame_decoder";
pub const ODD_SCORER: &str = "odd_scorer";
pub const CLASSIFIER: &str = "classifier";
pub const REGRESSOR: &str = "regressor";

/// Audio frames per video frame (100 Hz features, 25 fps video).
pub const VIDEO_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub n_mels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub feature_dim: usize,
}

impl AudioEncoderConfig {
    pub fn canonical() -> Self {
        AudioEncoderConfig { n_mels: N_MELS, hidden: 512, layers: 3, feature_dim: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityEncoderConfig {
    /// Output channels of the stride-2 conv blocks.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub height: usize,
    pub width: usize,
}

impl IdentityEncoderConfig {
    pub fn canonical() -> Self {
        IdentityEncoderConfig { channels: vec![32, 64, 128, 256, 512, 512], embed_dim: 64, height: 64, width: 128 }
    }

    /// Spatial size after block `i` (0-based).
    pub fn spatial(&self, i: usize) -> (usize, usize) {
        (self.height >> (i + 1), self.width >> (i + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.embed_dim == 0 {
            return Err(Error::Config("identity encoder needs at least one block and a non-empty embedding".into()));
        }
        if self.height % (1 << n) != 0 || self.width % (1 << n) != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible by 2^{n} for {n} stride-2 blocks",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub dim: usize,
    pub variance: f64,
}

impl NoiseConfig {
    pub fn canonical() -> Self {
        NoiseConfig { dim: 10, variance: 0.33 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretextModelConfig {
    pub audio: AudioEncoderConfig,
    pub identity: IdentityEncoderConfig,
    pub noise: NoiseConfig,
    pub scorer_hidden: usize,
    pub video_stride: usize,
}

impl PretextModelConfig {
    /// Full-size architecture: 3x512 GRU encoder, 64-d identity, 10-d noise.
    pub fn canonical() -> Self {
        PretextModelConfig {
            audio: AudioEncoderConfig::canonical(),
            identity: IdentityEncoderConfig::canonical(),
            noise: NoiseConfig::canonical(),
            scorer_hidden: 128,
            video_stride: VIDEO_STRIDE,
        }
    }

    /// Same topology with narrow layers, sized for single-core CPU runs.
    pub fn desk() -> Self {
        PretextModelConfig {
            audio: AudioEncoderConfig { n_mels: N_MELS, hidden: 48, layers: 3, feature_dim: 48 },
            identity: IdentityEncoderConfig { channels: vec![4, 8, 8, 16, 16, 16], embed_dim: 16, height: 64, width: 128 },
            noise: NoiseConfig::canonical(),
            scorer_hidden: 32,
            video_stride: VIDEO_STRIDE,
        }
    }

    /// Width of the per-frame latent `[z_aud | z_id | z_n]`.
    pub fn latent_dim(&self) -> usize {
        self.audio.feature_dim + self.identity.embed_dim + self.noise.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.identity.validate()?;
        if self.audio.n_mels == 0 || self.audio.hidden == 0 || self.audio.layers == 0 || self.audio.feature_dim == 0 {
            return Err(Error::Config("audio encoder dimensions must be positive".into()));
        }
        if self.noise.dim == 0 || !(self.noise.variance > 0.0) {
            return Err(Error::Config("noise dimension and variance must be positive".into()));
        }
        if self.video_stride == 0 || self.scorer_hidden == 0 {
            return Err(Error::Config("video stride and scorer width must be positive".into()));
        }
        Ok(())
    }
}

// ---- domain types ----------------------------------------------------------

/// Per-audio-frame encoder output `[t, feature_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures(pub Tensor);

impl EncoderFeatures {
    pub fn num_frames(&self) -> usize {
        self.0.dim(0)
    }

    /// Feature row of the final time step.
    pub fn last(&self) -> &[f64] {
        self.0.row(self.0.dim(0) - 1)
    }
}

/// Identity vector plus the intermediate maps fed to the decoder's skips.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding {
    pub vector: Vec<f64>,
    /// One `[C, h, w]` map per conv block, largest first.
    pub skip_maps: Vec<Tensor>,
}

/// `[T_v, noise_dim]` noise sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseCode(pub Tensor);

/// `[T_v, latent_dim]` decoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrameCode(pub Tensor);

/// `[T_v, 3, H, W]` frames with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor(pub Tensor);

// ---- audio encoder -----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub cfg: AudioEncoderConfig,
    gru: GruStack,
    fc: Linear,
}

impl AudioEncoder {
    pub fn new(store: &mut ParamStore, cfg: &AudioEncoderConfig, rng: &mut Rng) -> Self {
        let gru = GruStack::new(store, &format!("{AUDIO_ENCODER}.gru"), cfg.n_mels, cfg.hidden, cfg.layers, false, rng);
        let fc = Linear::new(store, &format!("{AUDIO_ENCODER}.fc"), cfg.hidden, cfg.feature_dim, rng);
        AudioEncoder { cfg: cfg.clone(), gru, fc }
    }

    /// `[B, T, n_mels]` to `[B, T, feature_dim]`; causal in time.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.cfg.n_mels || s[1] == 0 {
            return Err(Error::Shape(format!("audio encoder expects [B, T, {}], got {:?}", self.cfg.n_mels, s)));
        }
        let (h, _, _) = self.gru.forward(g, x)?;
        self.fc.forward(g, h)
    }

    /// Inference on one spectrogram.
    pub fn encode(&self, store: &ParamStore, x: &LogMelSpectrogram) -> Result<EncoderFeatures> {
        let mut out = self.encode_batch(store, &[x.frames()])?;
        Ok(out.remove(0))
    }

    /// Inference on equal-length `[t, n_mels]` inputs, batched.
    pub fn encode_batch(&self, store: &ParamStore, xs: &[&Tensor]) -> Result<Vec<EncoderFeatures>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let input = stack(xs)?;
        let (b, t) = (input.dim(0), input.dim(1));
        let mut g = Graph::new(store, false);
        let xv = g.constant(input);
        let y = self.forward(&mut g, xv)?;
        let f = self.cfg.feature_dim;
        let data = g.value(y).data();
        (0..b)
            .map(|i| Ok(EncoderFeatures(Tensor::from_vec(&[t, f], data[i * t * f..(i + 1) * t * f].to_vec())?)))
            .collect()
    }
}

/// Stack equal-shape tensors along a new leading axis.
pub fn stack(xs: &[&Tensor]) -> Result<Tensor> {
    let shape = xs[0].shape().to_vec();
    let mut data = Vec::with_capacity(xs.len() * xs[0].len());
    for x in xs {
        if x.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("cannot stack {:?} with {:?}", shape, x.shape())));
        }
        data.extend_from_slice(x.data());
    }
    let mut s = vec![xs.len()];
    s.extend_from_slice(&shape);
    Tensor::from_vec(&s, data)
}

// ---- identity encoder ----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct IdentityEncoder {
    pub cfg: IdentityEncoderConfig,
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm>,
    proj: Linear,
}

impl IdentityEncoder {
    pub fn new(store: &mut ParamStore, cfg: &IdentityEncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 3;
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{IDENTITY_ENCODER}.block{i}.conv"), cin, c, 4, 2, 1, rng));
            norms.push(BatchNorm::new(store, &format!("{IDENTITY_ENCODER}.block{i}.bn"), c));
            cin = c;
        }
        let (h, w) = cfg.spatial(cfg.channels.len() - 1);
        let proj = Linear::new(store, &format!("{IDENTITY_ENCODER}.proj"), cin * h * w, cfg.embed_dim, rng);
        Ok(IdentityEncoder { cfg: cfg.clone(), convs, norms, proj })
    }

    pub fn num_blocks(&self) -> usize {
        self.convs.len()
    }

    /// `[N, 3, H, W]` frames to `([N, embed_dim], skip maps)`.
    pub fn forward(&self, g: &mut Graph, frames: Var) -> Result<(Var, Vec<Var>)> {
        let s = g.shape(frames);
        if s.len() != 4 || s[1] != 3 || s[2] != self.cfg.height || s[3] != self.cfg.width {
            return Err(Error::Shape(format!(
                "identity encoder expects [N, 3, {}, {}], got {:?}",
                self.cfg.height, self.cfg.width, s
            )));
        }
        let n = s[0];
        let mut x = frames;
        let mut skips = Vec::with_capacity(self.convs.len());
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            let c = conv.forward(g, x)?;
            let b = bn.forward(g, c)?;
            x = g.relu(b);
            skips.push(x);
        }
        let flat_len = g.value(x).len() / n;
        let flat = g.reshape(x, &[n, flat_len])?;
        let e = self.proj.forward(g, flat)?;
        Ok((e, skips))
    }

    /// Inference on a single `[3, H, W]` frame.
    pub fn embed(&self, store: &ParamStore, frame: &Tensor) -> Result<IdentityEmbedding> {
        let s = frame.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected a single [3, H, W] frame, got {s:?}")));
        }
        let mut g = Graph::new(store, false);
        let mut shape = vec![1];
        shape.extend_from_slice(s);
        let x = g.constant(frame.clone().reshape(&shape)?);
        let (e, skips) = self.forward(&mut g, x)?;
        let vector = g.value(e).data().to_vec();
        let skip_maps = skips
            .iter()
            .map(|&v| {
                let t = g.value(v);
                t.clone().reshape(&t.shape()[1..])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IdentityEmbedding { vector, skip_maps })
    }
}

// ---- noise generator ------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct NoiseGenerator {
    pub cfg: NoiseConfig,
    gru: GruStack,
}

impl NoiseGenerator {
    pub fn new(store: &mut ParamStore, cfg: &NoiseConfig, rng: &mut Rng) -> Self {
        let gru = GruStack::new(store, &format!("{NOISE_GENERATOR}.gru"), cfg.dim, cfg.dim, 1, false, rng);
        NoiseGenerator { cfg: cfg.clone(), gru }
    }

    /// Raw i.i.d. Gaussian draws, `[batch, frames, dim]`.
    pub fn sample(&self, batch: usize, frames: usize, rng: &mut Rng) -> Tensor {
        sample_gaussian(&[batch, frames, self.cfg.dim], self.cfg.variance, rng)
    }

    pub fn forward(&self, g: &mut Graph, noise: Var) -> Result<Var> {
        Ok(self.gru.forward(g, noise)?.0)
    }

    /// Noise code for `frames` video frames from `seed`.
    pub fn generate(&self, store: &ParamStore, frames: usize, seed: u64) -> Result<NoiseCode> {
        if frames == 0 {
            return Err(Error::Shape("noise sequence needs at least one frame".into()));
        }
        let mut r = rng::stream(seed, "noise");
        let raw = self.sample(1, frames, &mut r);
        let mut g = Graph::new(store, false);
        let x = g.constant(raw);
        let y = self.forward(&mut g, x)?;
        Ok(NoiseCode(g.value(y).clone().reshape(&[frames, self.cfg.dim])?))
    }
}

pub fn sample_gaussian(shape: &[usize], variance: f64, rng: &mut Rng) -> Tensor {
    let normal = Normal::new(0.0, libm::sqrt(variance)).expect("positive variance");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("sized")
}

// ---- latent assembly ------------------------------------------------------------

/// Video-rate indices `0, stride, 2 * stride, ...` of a `t`-frame stream.
pub fn video_rate_indices(t: usize, stride: usize) -> Vec<usize> {
    (0..t).step_by(stride).collect()
}

/// Concatenate `z_aud` (subsampled to video rate), the broadcast identity
/// vector and the noise sequence: `[B, T_v, F + E + N]`.
pub fn assemble_latent(g: &mut Graph, z_aud: Var, z_id: Var, z_n: Var, stride: usize) -> Result<Var> {
    let (sa, si, sn) = (g.shape(z_aud).to_vec(), g.shape(z_id).to_vec(), g.shape(z_n).to_vec());
    if sa.len() != 3 || si.len() != 2 || sn.len() != 3 || sa[0] != si[0] || sa[0] != sn[0] {
        return Err(Error::Shape(format!("latent parts {sa:?}, {si:?}, {sn:?}")));
    }
    let idx = video_rate_indices(sa[1], stride);
    if idx.len() != sn[1] {
        return Err(Error::Alignment(format!(
            "{} audio frames give {} video frames at stride {stride}, noise has {}",
            sa[1],
            idx.len(),
            sn[1]
        )));
    }
    let a = g.select(z_aud, 1, &idx)?;
    let id3 = g.reshape(z_id, &[si[0], 1, si[1]])?;
    let id = g.select(id3, 1, &vec![0; idx.len()])?;
    g.concat(&[a, id, z_n], 2)
}

/// Tensor-level latent assembly for a single clip.
pub fn assemble_latent_frames(
    z_aud: &EncoderFeatures,
    z_id: &IdentityEmbedding,
    z_n: &NoiseCode,
    stride: usize,
) -> Result<LatentFrameCode> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let (t, f) = (z_aud.0.dim(0), z_aud.0.dim(1));
    let a = g.constant(z_aud.0.clone().reshape(&[1, t, f])?);
    let i = g.constant(Tensor::from_vec(&[1, z_id.vector.len()], z_id.vector.clone())?);
    let (tv, nd) = (z_n.0.dim(0), z_n.0.dim(1));
    let n = g.constant(z_n.0.clone().reshape(&[1, tv, nd])?);
    let l = assemble_latent(&mut g, a, i, n, stride)?;
    let s = g.shape(l).to_vec();
    Ok(LatentFrameCode(g.value(l).clone().reshape(&s[1..])?))
}

// ---- frame decoder ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FrameDecoder {
    id_cfg: IdentityEncoderConfig,
    fc: Linear,
    deconvs: Vec<ConvTranspose2d>,
    norms: Vec<BatchNorm>,
}

impl FrameDecoder {
    /// Mirrors the identity encoder: each block concatenates the matching
    /// skip map before a stride-2 transposed convolution.
    pub fn new(store: &mut ParamStore, latent_dim: usize, id_cfg: &IdentityEncoderConfig, rng: &mut Rng) -> Result<Self> {
        id_cfg.validate()?;
        let ch = &id_cfg.channels;
        let nb = ch.len();
        let (h, w) = id_cfg.spatial(nb - 1);
        let fc = Linear::new(store, &format!("{FRAME_DECODER}.fc"), latent_dim, ch[nb - 1] * h * w, rng);
        let mut deconvs = Vec::new();
        let mut norms = Vec::new();
        let mut cur = ch[nb - 1];
        for j in 0..nb {
            let skip = ch[nb - 1 - j];
            let out = if j + 1 < nb { ch[nb - 2 - j] } else { 3 };
            deconvs.push(ConvTranspose2d::new(store, &format!("{FRAME_DECODER}.block{j}.deconv"), cur + skip, out, 4, 2, 1, rng));
            if j + 1 < nb {
                norms.push(BatchNorm::new(store, &format!("{FRAME_DECODER}.block{j}.bn"), out));
            }
            cur = out;
        }
        Ok(FrameDecoder { id_cfg: id_cfg.clone(), fc, deconvs, norms })
    }

    /// `code: [N, latent]`, `skips`: identity-encoder maps with batch `N`.
    /// Returns `[N, 3, H, W]` in `[-1, 1]`.
    pub fn forward(&self, g: &mut Graph, code: Var, skips: &[Var]) -> Result<Var> {
        let nb = self.deconvs.len();
        if skips.len() != nb {
            return Err(Error::Shape(format!("decoder needs {nb} skip maps, got {}", skips.len())));
        }
        let cs = g.shape(code).to_vec();
        if cs.len() != 2 {
            return Err(Error::Shape(format!("decoder code must be [N, latent], got {cs:?}")));
        }
        let n = cs[0];
        let (h, w) = self.id_cfg.spatial(nb - 1);
        let base = self.fc.forward(g, code)?;
        let base = g.relu(base);
        let mut x = g.reshape(base, &[n, self.id_cfg.channels[nb - 1], h, w])?;
        for j in 0..nb {
            let cat = g.concat(&[x, skips[nb - 1 - j]], 1)?;
            let y = self.deconvs[j].forward(g, cat)?;
            x = if j + 1 < nb {
                let b = self.norms[j].forward(g, y)?;
                g.relu(b)
            } else {
                g.tanh(y)
            };
        }
        Ok(x)
    }

    /// Decode a whole clip with inference-mode normalization; the identity
    /// skips are broadcast over time.
    pub fn decode(&self, store: &ParamStore, code: &LatentFrameCode, identity: &IdentityEmbedding) -> Result<VideoTensor> {
        let tv = code.0.dim(0);
        let mut g = Graph::new(store, false);
        let c = g.constant(code.0.clone());
        let mut skips = Vec::new();
        for m in &identity.skip_maps {
            let mut s = vec![1];
            s.extend_from_slice(m.shape());
            let v = g.constant(m.clone().reshape(&s)?);
            skips.push(g.select(v, 0, &vec![0; tv])?);
        }
        let y = self.forward(&mut g, c, &skips)?;
        Ok(VideoTensor(g.value(y).clone()))
    }
}

// ---- odd-one-out scorer ----------------------------------------------------------

/// Shared per-clip scoring map: feature -> hidden -> 1.
#[derive(Clone, Debug)]
pub struct OddScorer {
    fc1: Linear,
    fc2: Linear,
}

impl OddScorer {
    pub fn new(store: &mut ParamStore, feature_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        OddScorer {
            fc1: Linear::new(store, &format!("{ODD_SCORER}.fc1"), feature_dim, hidden, rng),
            fc2: Linear::new(store, &format!("{ODD_SCORER}.fc2"), hidden, 1, rng),
        }
    }

    /// `[N, F]` clip summaries to `[N]` scores.
    pub fn forward(&self, g: &mut Graph, summaries: Var) -> Result<Var> {
        let h = self.fc1.forward(g, summaries)?;
        let h = g.relu(h);
        let s = self.fc2.forward(g, h)?;
        let n = g.shape(s)[0];
        g.reshape(s, &[n])
    }

    /// One score per clip, each from the clip's final-step feature.
    pub fn score(&self, store: &ParamStore, clips: &[EncoderFeatures]) -> Result<Vec<f64>> {
        if clips.len() < 2 {
            return Err(Error::GroupTooSmall(clips.len()));
        }
        let f = clips[0].0.dim(1);
        let mut data = Vec::with_capacity(clips.len() * f);
        for c in clips {
            if c.0.dim(1) != f {
                return Err(Error::Shape("clip feature widths differ".into()));
            }
            data.extend_from_slice(c.last());
        }
        let mut g = Graph::new(store, false);
        let x = g.constant(Tensor::from_vec(&[clips.len(), f], data)?);
        let s = self.forward(&mut g, x)?;
        Ok(g.value(s).data().to_vec())
    }
}

// ---- pretext bundle ----------------------------------------------------------------

/// Every sub-network trained during pretraining.
#[derive(Clone, Debug)]
pub struct PretextModel {
    pub cfg: PretextModelConfig,
    pub audio: AudioEncoder,
    pub identity: IdentityEncoder,
    pub noise: NoiseGenerator,
    pub decoder: FrameDecoder,
    pub scorer: OddScorer,
}

impl PretextModel {
    /// Build with initial weights; each component draws from its own stream.
    pub fn new(cfg: &PretextModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let audio = AudioEncoder::new(&mut store, &cfg.audio, &mut rng::stream(seed, AUDIO_ENCODER));
        let identity = IdentityEncoder::new(&mut store, &cfg.identity, &mut rng::stream(seed, IDENTITY_ENCODER))?;
        let noise = NoiseGenerator::new(&mut store, &cfg.noise, &mut rng::stream(seed, NOISE_GENERATOR));
        let decoder = FrameDecoder::new(&mut store, cfg.latent_dim(), &cfg.identity, &mut rng::stream(seed, FRAME_DECODER))?;
        let scorer = OddScorer::new(&mut store, cfg.audio.feature_dim, cfg.scorer_hidden, &mut rng::stream(seed, ODD_SCORER));
        Ok((PretextModel { cfg: cfg.clone(), audio, identity, noise, decoder, scorer }, store))
    }

    /// Rebuild the component structure over an existing store (e.g. loaded
    /// from a checkpoint); entries must match the configuration.
    pub fn attach(cfg: &PretextModelConfig, store: &ParamStore) -> Result<Self> {
        let (m, fresh) = Self::new(cfg, 0)?;
        check_layout(&fresh, store)?;
        Ok(m)
    }
}

/// Fail unless `store` has exactly the names and shapes of `expected`.
pub fn check_layout(expected: &ParamStore, store: &ParamStore) -> Result<()> {
    for e in expected.entries() {
        match store.by_name(&e.name) {
            Some(t) if t.shape() == e.value.shape() => {}
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "'{}' has shape {:?}, configuration expects {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing parameter '{}'", e.name))),
        }
    }
    Ok(())
}

// ---- downstream heads ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BgruConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl BgruConfig {
    pub fn canonical() -> Self {
        BgruConfig { hidden: 256, layers: 2 }
    }
}

/// Two-direction GRU stack + linear head on the final states.
#[derive(Clone, Debug)]
pub struct BgruClassifier {
    pub input_dim: usize,
    pub classes: usize,
    trunk: GruStack,
    head: Linear,
}

impl BgruClassifier {
    pub fn new(store: &mut ParamStore, input_dim: usize, classes: usize, cfg: &BgruConfig, rng: &mut Rng) -> Self {
        let trunk = GruStack::new(store, &format!("{CLASSIFIER}.bgru"), input_dim, cfg.hidden, cfg.layers, true, rng);
        let head = Linear::new(store, &format!("{CLASSIFIER}.head"), 2 * cfg.hidden, classes, rng);
        BgruClassifier { input_dim, classes, trunk, head }
    }

    /// `[B, T, d]` to `[B, classes]` logits.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.input_dim || s[1] == 0 {
            return Err(Error::Shape(format!("classifier expects [B, T, {}], got {s:?}", self.input_dim)));
        }
        let (b, t, h) = (s[0], s[1], self.trunk.hidden);
        let (_, fo, bo) = self.trunk.forward(g, x)?;
        let bo = bo.expect("bidirectional trunk");
        let f_last = g.select(fo, 1, &[t - 1])?;
        let f_last = g.reshape(f_last, &[b, h])?;
        let b_first = g.select(bo, 1, &[0])?;
        let b_first = g.reshape(b_first, &[b, h])?;
        let cat = g.concat(&[f_last, b_first], 1)?;
        self.head.forward(g, cat)
    }
}

/// Two-direction GRU stack + per-step linear output.
#[derive(Clone, Debug)]
pub struct BgruRegressor {
    pub input_dim: usize,
    trunk: GruStack,
    head: Linear,
}

impl BgruRegressor {
    pub fn new(store: &mut ParamStore, input_dim: usize, cfg: &BgruConfig, rng: &mut Rng) -> Self {
        let trunk = GruStack::new(store, &format!("{REGRESSOR}.bgru"), input_dim, cfg.hidden, cfg.layers, true, rng);
        let head = Linear::new(store, &format!("{REGRESSOR}.head"), 2 * cfg.hidden, 1, rng);
        BgruRegressor { input_dim, trunk, head }
    }

    /// `[B, T, d]` to `[B, T]` predictions.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.input_dim || s[1] == 0 {
            return Err(Error::Shape(format!("regressor expects [B, T, {}], got {s:?}", self.input_dim)));
        }
        let (out, _, _) = self.trunk.forward(g, x)?;
        let y = self.head.forward(g, out)?;
        g.reshape(y, &[s[0], s[1]])
    }
}
