//! Audio frontend: log-mel and MFCC features, babble synthesis, SNR-exact
//! mixing, and the window-swap jumbling used by the odd-one-out task.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 80;
pub const N_MFCC: usize = 13;
pub const FRAME_RATE: f64 = 100.0;
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono audio with amplitudes nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InputTooShort { got: 0, need: 1 });
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform sample".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square amplitude.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    /// Linear-interpolation resampling to `rate`.
    pub fn resample(&self, rate: u32) -> Result<Waveform> {
        if rate == self.sample_rate {
            return Ok(self.clone());
        }
        if rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        let n_out = ((self.samples.len() as u64 * rate as u64) / self.sample_rate as u64).max(1) as usize;
        let step = self.sample_rate as f64 / rate as f64;
        let last = self.samples.len() - 1;
        let out = (0..n_out)
            .map(|i| {
                let pos = i as f64 * step;
                let i0 = (pos as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = pos - i0 as f64;
                self.samples[i0] * (1.0 - frac) + self.samples[i1] * frac
            })
            .collect();
        Waveform::new(out, rate)
    }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Log-mel energies, one row per 10 ms frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    frames: Tensor,
}

impl LogMelSpectrogram {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.ndim() != 2 || frames.dim(1) != N_MELS || frames.dim(0) == 0 {
            return Err(Error::Shape(alloc::format!("log-mel must be [t, {N_MELS}], got {:?}", frames.shape())));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("log-mel entry".into()));
        }
        Ok(LogMelSpectrogram { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }
}

/// 13 cepstral coefficients followed by their deltas and delta-deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct MfccFeatures {
    frames: Tensor,
}

impl MfccFeatures {
    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }
}

/// Framing, window and filterbank of the log-mel frontend.
#[derive(Clone, Debug)]
pub struct MelFrontend {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub n_fft: usize,
    window: Vec<f64>,
    /// `[n_mels][n_fft / 2 + 1]`
    filters: Vec<Vec<f64>>,
    fft: Fft,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * libm::log10(1.0 + f / 700.0)
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (libm::pow(10.0, m / 2595.0) - 1.0)
}

impl Default for MelFrontend {
    fn default() -> Self {
        MelFrontend::new(SAMPLE_RATE, 0.025, 0.010, 512, N_MELS, 0.0, 8000.0)
    }
}

impl MelFrontend {
    pub fn new(sample_rate: u32, win_secs: f64, hop_secs: f64, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Self {
        let win = libm::round(win_secs * sample_rate as f64) as usize;
        let hop = libm::round(hop_secs * sample_rate as f64) as usize;
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * libm::cos(2.0 * core::f64::consts::PI * i as f64 / win as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let pts: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let filters = (0..n_mels)
            .map(|m| {
                let (lo, c, hi) = (pts[m], pts[m + 1], pts[m + 2]);
                (0..n_bins)
                    .map(|b| {
                        let f = b as f64 * sample_rate as f64 / n_fft as f64;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= c {
                            (f - lo) / (c - lo)
                        } else {
                            (hi - f) / (hi - c)
                        }
                    })
                    .collect()
            })
            .collect();
        MelFrontend { sample_rate, win, hop, n_fft, window, filters, fft: Fft::new(n_fft) }
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    /// Number of frames produced for `len` samples.
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        if len < self.win {
            return Err(Error::InputTooShort { got: len, need: self.win });
        }
        Ok(1 + (len - self.win) / self.hop)
    }

    pub fn log_mel(&self, w: &Waveform) -> Result<LogMelSpectrogram> {
        if w.sample_rate() != self.sample_rate {
            return Err(Error::Alignment(alloc::format!(
                "frontend expects {} Hz, got {} Hz",
                self.sample_rate,
                w.sample_rate()
            )));
        }
        let t = self.frame_count(w.len())?;
        let n_mels = self.n_mels();
        let n_bins = self.n_fft / 2 + 1;
        let mut out = Vec::with_capacity(t * n_mels);
        let mut re = vec![0.0; self.n_fft];
        let mut im = vec![0.0; self.n_fft];
        let mut pow = vec![0.0; n_bins];
        let floor = libm::log(LOG_FLOOR);
        for f in 0..t {
            let frame = &w.samples()[f * self.hop..f * self.hop + self.win];
            re.iter_mut().for_each(|v| *v = 0.0);
            im.iter_mut().for_each(|v| *v = 0.0);
            for (i, (s, wv)) in frame.iter().zip(&self.window).enumerate() {
                re[i] = s * wv;
            }
            self.fft.forward(&mut re, &mut im);
            for b in 0..n_bins {
                pow[b] = re[b] * re[b] + im[b] * im[b];
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&pow).map(|(a, p)| a * p).sum();
                out.push(if e > LOG_FLOOR { libm::log(e) } else { floor });
            }
        }
        LogMelSpectrogram::new(Tensor::from_vec(&[t, n_mels], out)?)
    }

    pub fn mfcc(&self, w: &Waveform) -> Result<MfccFeatures> {
        let lm = self.log_mel(w)?;
        Ok(mfcc_from_log_mel(&lm))
    }
}

pub fn compute_log_mel(w: &Waveform) -> Result<LogMelSpectrogram> {
    MelFrontend::default().log_mel(w)
}

pub fn compute_mfcc(w: &Waveform) -> Result<MfccFeatures> {
    MelFrontend::default().mfcc(w)
}

/// Orthonormal DCT-II of each log-mel row (first 13 coefficients), followed
/// by deltas and delta-deltas.
pub fn mfcc_from_log_mel(lm: &LogMelSpectrogram) -> MfccFeatures {
    let x = lm.frames();
    let (t, m) = (x.dim(0), x.dim(1));
    let mut base = vec![0.0; t * N_MFCC];
    for f in 0..t {
        let row = x.row(f);
        for k in 0..N_MFCC {
            let scale = if k == 0 { libm::sqrt(1.0 / m as f64) } else { libm::sqrt(2.0 / m as f64) };
            let s: f64 = row
                .iter()
                .enumerate()
                .map(|(n, v)| v * libm::cos(core::f64::consts::PI * k as f64 * (2 * n + 1) as f64 / (2 * m) as f64))
                .sum();
            base[f * N_MFCC + k] = scale * s;
        }
    }
    let d1 = deltas(&base, t, N_MFCC);
    let d2 = deltas(&d1, t, N_MFCC);
    let mut out = Vec::with_capacity(t * 3 * N_MFCC);
    for f in 0..t {
        out.extend_from_slice(&base[f * N_MFCC..(f + 1) * N_MFCC]);
        out.extend_from_slice(&d1[f * N_MFCC..(f + 1) * N_MFCC]);
        out.extend_from_slice(&d2[f * N_MFCC..(f + 1) * N_MFCC]);
    }
    MfccFeatures { frames: Tensor::from_vec(&[t, 3 * N_MFCC], out).expect("sized above") }
}

/// Regression deltas over a +/-2 frame window, edges replicated.
pub fn deltas(x: &[f64], t: usize, d: usize) -> Vec<f64> {
    const N: isize = 2;
    let denom = 2.0 * (1..=N).map(|n| (n * n) as f64).sum::<f64>();
    let clamp = |i: isize| i.clamp(0, t as isize - 1) as usize;
    let mut out = vec![0.0; t * d];
    for f in 0..t as isize {
        for c in 0..d {
            let mut s = 0.0;
            for n in 1..=N {
                s += n as f64 * (x[clamp(f + n) * d + c] - x[clamp(f - n) * d + c]);
            }
            out[f as usize * d + c] = s / denom;
        }
    }
    out
}

/// Sum of `m` distinct, randomly offset pool clips, peak-normalized to 1.
/// `target_len` is in samples.
pub fn synth_babble(pool: &[Waveform], m: usize, target_len: usize, seed: u64) -> Result<Waveform> {
    if pool.is_empty() || m == 0 || m > pool.len() || target_len == 0 {
        return Err(Error::EmptyPool);
    }
    let rate = pool[0].sample_rate();
    if pool.iter().any(|w| w.sample_rate() != rate) {
        return Err(Error::Alignment("babble pool mixes sample rates".into()));
    }
    let mut rng = crate::rng::stream(seed, "babble");
    let mut out = vec![0.0f64; target_len];
    for idx in sample(&mut rng, pool.len(), m).into_iter() {
        let clip = pool[idx].samples();
        if clip.len() >= target_len {
            let off = rng.random_range(0..=clip.len() - target_len);
            for (o, s) in out.iter_mut().zip(&clip[off..off + target_len]) {
                *o += s;
            }
        } else {
            let off = rng.random_range(0..clip.len());
            for (i, o) in out.iter_mut().enumerate() {
                *o += clip[(off + i) % clip.len()];
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |p, v| p.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    Waveform::new(out, rate)
}

/// `clean + g * noise` with `g` chosen so the clean-to-scaled-noise power
/// ratio equals `snr_db`. Noise shorter than `clean` is tiled. Returns the
/// mixture and the scaled noise actually added.
pub fn mix_at_snr_components(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, Vec<f64>)> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::Alignment(alloc::format!(
            "mixing {} Hz speech with {} Hz noise",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    let n = clean.len();
    let seg: Vec<f64> = (0..n).map(|i| noise.samples()[i % noise.len()]).collect();
    let (pc, pn) = (clean.power(), power(&seg));
    if pc == 0.0 || pn == 0.0 {
        return Err(Error::ZeroPowerSignal);
    }
    let g = libm::sqrt(pc / (pn * libm::pow(10.0, snr_db / 10.0)));
    let scaled: Vec<f64> = seg.iter().map(|v| v * g).collect();
    let mix = clean.samples().iter().zip(&scaled).map(|(c, s)| c + s).collect();
    Ok((Waveform::new(mix, clean.sample_rate())?, scaled))
}

pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    Ok(mix_at_snr_components(clean, noise, snr_db)?.0)
}

pub const DEFAULT_JUMBLE_FRACTION: f64 = 0.15;
const JUMBLE_ATTEMPTS: usize = 1000;

/// Two equal-length, disjoint frame windows to exchange.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumbleSpec {
    pub window_fraction: f64,
    pub start_a: usize,
    pub start_b: usize,
    pub window_len: usize,
}

impl JumbleSpec {
    pub fn window_len_for(frames: usize, fraction: f64) -> usize {
        (libm::round(fraction * frames as f64) as usize).max(1)
    }

    /// Random disjoint windows for a sequence of `frames` frames.
    pub fn random(frames: usize, fraction: f64, rng: &mut Rng) -> Result<JumbleSpec> {
        if !(fraction > 0.0 && fraction <= 0.5) {
            return Err(Error::Config(alloc::format!("jumble fraction {fraction} outside (0, 0.5]")));
        }
        let len = Self::window_len_for(frames, fraction);
        if frames < 2 * len {
            return Err(Error::TooShortToJumble { frames, window: len });
        }
        let hi = frames - len;
        for _ in 0..JUMBLE_ATTEMPTS {
            let a = rng.random_range(0..=hi);
            let b = rng.random_range(0..=hi);
            if a.abs_diff(b) >= len {
                let (start_a, start_b) = if a < b { (a, b) } else { (b, a) };
                return Ok(JumbleSpec { window_fraction: fraction, start_a, start_b, window_len: len });
            }
        }
        Ok(JumbleSpec { window_fraction: fraction, start_a: 0, start_b: hi, window_len: len })
    }

    fn validate(&self, frames: usize) -> Result<()> {
        let l = self.window_len;
        if l == 0 || self.start_a + l > frames || self.start_b + l > frames || self.start_a.abs_diff(self.start_b) < l {
            return Err(Error::TooShortToJumble { frames, window: l });
        }
        Ok(())
    }
}

/// Exchange the two windows of `spec` in the frame sequence.
pub fn jumble_with(x: &LogMelSpectrogram, spec: &JumbleSpec) -> Result<LogMelSpectrogram> {
    Ok(LogMelSpectrogram { frames: jumble_rows(x.frames(), spec)? })
}

/// Row-block swap on any `[t, d]` tensor.
pub fn jumble_rows(x: &Tensor, spec: &JumbleSpec) -> Result<Tensor> {
    let t = x.dim(0);
    spec.validate(t)?;
    let d = x.len() / t;
    let mut out = x.clone();
    let data = out.data_mut();
    let (a, b, l) = (spec.start_a * d, spec.start_b * d, spec.window_len * d);
    for i in 0..l {
        data.swap(a + i, b + i);
    }
    Ok(out)
}

/// Jumble with windows drawn from `rng`.
pub fn jumble(x: &LogMelSpectrogram, fraction: f64, rng: &mut Rng) -> Result<(LogMelSpectrogram, JumbleSpec)> {
    let spec = JumbleSpec::random(x.num_frames(), fraction, rng)?;
    Ok((jumble_with(x, &spec)?, spec))
}

/// In-place iterative radix-2 complex FFT.
#[derive(Clone, Debug)]
struct Fft {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Fft {
    fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT size must be a power of two");
        let (cos, sin) = (0..n / 2)
            .map(|k| {
                let a = -2.0 * core::f64::consts::PI * k as f64 / n as f64;
                (libm::cos(a), libm::sin(a))
            })
            .unzip();
        Fft { n, cos, sin }
    }

    fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let (wr, wi) = (self.cos[k * step], self.sin[k * step]);
                    let (i, j) = (start + k, start + k + len / 2);
                    let tr = re[j] * wr - im[j] * wi;
                    let ti = re[j] * wi + im[j] * wr;
                    re[j] = re[i] - tr;
                    im[j] = im[i] - ti;
                    re[i] += tr;
                    im[i] += ti;
                }
            }
            len <<= 1;
        }
    }
}
