//! Clip records, speaker-disjoint splits, nested subsetting and the
//! procedural audiovisual corpus.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::VideoTensor;
use crate::rng;
use crate::signal::{Waveform, SAMPLE_RATE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One line of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub speaker_id: String,
    pub audio_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affect_track: Option<Vec<f64>>,
    pub split: Split,
}

impl ClipRecord {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some() || self.affect_track.is_some()
    }
}

/// Fail if any speaker appears in more than one split.
pub fn check_speaker_disjoint(records: &[ClipRecord]) -> Result<()> {
    let mut owner: alloc::collections::BTreeMap<&str, Split> = alloc::collections::BTreeMap::new();
    for r in records {
        match owner.get(r.speaker_id.as_str()) {
            Some(&s) if s != r.split => {
                return Err(Error::Split(format!(
                    "speaker '{}' appears in both {} and {}",
                    r.speaker_id,
                    s.as_str(),
                    r.split.as_str()
                )))
            }
            _ => {
                owner.insert(&r.speaker_id, r.split);
            }
        }
    }
    Ok(())
}

/// Assign whole speakers to train/val/test in roughly the given ratios.
/// Every split receives at least one speaker.
pub fn split_speakers(records: &[ClipRecord], ratios: [f64; 3], seed: u64) -> Result<Vec<ClipRecord>> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Split(format!("invalid split ratios {ratios:?}")));
    }
    let speakers: BTreeSet<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect();
    let n = speakers.len();
    if n < 3 {
        return Err(Error::Split(format!("need at least 3 speakers, got {n}")));
    }
    let mut order: Vec<&str> = speakers.into_iter().collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let total: f64 = ratios.iter().sum();
    let mut n_train = libm::round(ratios[0] / total * n as f64) as usize;
    let mut n_val = libm::round(ratios[1] / total * n as f64) as usize;
    n_train = n_train.clamp(1, n - 2);
    n_val = n_val.clamp(1, n - 1 - n_train);
    let assign = |i: usize| {
        if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };
    let lookup: alloc::collections::BTreeMap<&str, Split> = order.iter().enumerate().map(|(i, s)| (*s, assign(i))).collect();
    Ok(records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.split = lookup[r.speaker_id.as_str()];
            r
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetKind {
    /// Keep a fraction of the training clips.
    PretrainClips,
    /// Keep labels on a fraction of the training clips.
    Labels,
}

/// Training clips ranked by a seeded per-clip hash; the first `fraction`
/// of the ranking is selected, so larger fractions contain smaller ones.
fn ranked_train(records: &[ClipRecord], seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == Split::Train).collect();
    idx.sort_by(|&a, &b| {
        let (ha, hb) = (rng::unit_hash(seed, &records[a].clip_id), rng::unit_hash(seed, &records[b].clip_id));
        ha.total_cmp(&hb).then(records[a].clip_id.cmp(&records[b].clip_id))
    });
    idx
}

/// Nested fraction subsetting of the training split. Validation and test
/// records pass through unchanged.
pub fn subset_fraction(records: &[ClipRecord], fraction: f64, what: SubsetKind, seed: u64) -> Result<Vec<ClipRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subset fraction {fraction} outside (0, 1]")));
    }
    let ranked = ranked_train(records, seed);
    let keep_n = libm::round(fraction * ranked.len() as f64) as usize;
    if keep_n == 0 {
        return Err(Error::EmptySubset(fraction));
    }
    let mut keep = vec![false; records.len()];
    for &i in &ranked[..keep_n] {
        keep[i] = true;
    }
    Ok(match what {
        SubsetKind::PretrainClips => records
            .iter()
            .enumerate()
            .filter(|(i, r)| r.split != Split::Train || keep[*i])
            .map(|(_, r)| r.clone())
            .collect(),
        SubsetKind::Labels => records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut r = r.clone();
                if r.split == Split::Train && !keep[i] {
                    r.label = None;
                    r.affect_track = None;
                }
                r
            })
            .collect(),
    })
}

// ---- synthetic corpus ----------------------------------------------------------------

pub const VIDEO_FPS: f64 = 25.0;
pub const FRAME_CHANNELS: usize = 3;
pub const FRAME_HEIGHT: usize = 64;
pub const FRAME_WIDTH: usize = 128;

const MOUTH_ROW: f64 = 44.0;
const MOUTH_COLS: (usize, usize) = (24, 104);
const MOUTH_MIN: f64 = 2.0;
const MOUTH_GAIN: f64 = 28.0;
const MOUTH_COLOR: [f64; 3] = [0.85, -0.7, -0.6];
const EXPR_ROWS: usize = 16;
/// Carrier amplitude between syllables, relative to the syllable peak.
const VOICING_FLOOR: f64 = 0.25;
const EXPR_COLS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_speakers: usize,
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub clip_seconds: f64,
    /// Speaker pitch factors are drawn from `[1 / spread, spread]`.
    pub pitch_spread: f64,
    /// Frequency ratio between the end and the start of a clip.
    pub glide: f64,
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_speakers: 12,
            n_classes: 4,
            clips_per_class: 4,
            clip_seconds: 1.0,
            pitch_spread: 1.4,
            glide: 2.0,
            split_ratios: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if self.n_speakers < 3 {
            return Err(Error::Config(format!("n_speakers must be at least 3, got {}", self.n_speakers)));
        }
        if self.clips_per_class == 0 {
            return Err(Error::Config("clips_per_class must be positive".into()));
        }
        if !(self.clip_seconds >= 0.2 && self.clip_seconds <= 30.0) {
            return Err(Error::Config(format!("clip_seconds {} outside [0.2, 30]", self.clip_seconds)));
        }
        if !(self.pitch_spread >= 1.0) || !(self.glide > 0.0) {
            return Err(Error::Config("pitch_spread must be >= 1 and glide > 0".into()));
        }
        Ok(())
    }
}

/// Per-speaker appearance and voice.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerStyle {
    pub pitch: f64,
    pub harmonics: [f64; 3],
    texture_freq: (f64, f64),
    texture_phase: (f64, f64),
    texture_color: [f64; 3],
}

impl SpeakerStyle {
    fn draw(seed: u64, speaker: usize, spread: f64) -> Self {
        let mut r = rng::stream(seed, &format!("speaker-{speaker}"));
        let lp = libm::log(spread);
        let pitch = libm::exp(r.random_range(-lp..=lp));
        SpeakerStyle {
            pitch,
            harmonics: [1.0, r.random_range(0.1..0.8), r.random_range(0.05..0.5)],
            texture_freq: (r.random_range(1.0..4.0), r.random_range(1.0..3.0)),
            texture_phase: (r.random_range(0.0..2.0 * PI), r.random_range(0.0..2.0 * PI)),
            texture_color: [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)],
        }
    }

    fn background(&self, c: usize, y: usize, x: usize) -> f64 {
        let u = x as f64 / FRAME_WIDTH as f64;
        let v = y as f64 / FRAME_HEIGHT as f64;
        let s = libm::sin(2.0 * PI * self.texture_freq.0 * u + self.texture_phase.0)
            * libm::cos(2.0 * PI * self.texture_freq.1 * v + self.texture_phase.1);
        0.1 * self.texture_color[c] + 0.4 * s * (0.5 + self.texture_color[c].abs())
    }
}

/// Expression template value for `class` at corner pixel `(y, x)`.
pub fn expression_template(class: usize, n_classes: usize, y: usize, x: usize) -> f64 {
    let theta = PI * class as f64 / n_classes as f64;
    let u = x as f64 / EXPR_COLS as f64;
    let v = y as f64 / EXPR_ROWS as f64;
    0.9 * libm::cos(2.0 * PI * (1.5 * u * libm::cos(theta) + 1.5 * v * libm::sin(theta)))
}

/// Syllable-shaped amplitude envelope: `class + 1` raised-cosine bumps.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    centers: Vec<f64>,
    width: f64,
}

impl Envelope {
    fn draw(class: usize, n_classes: usize, duration: f64, r: &mut rng::Rng) -> Self {
        let n = class + 1;
        let seg = 0.8 * duration / n as f64;
        let width = 0.8 * duration / n_classes as f64 * 0.8 * r.random_range(0.9..1.1);
        let centers = (0..n)
            .map(|k| 0.1 * duration + (k as f64 + 0.5) * seg + r.random_range(-0.1..0.1) * (seg - width).max(0.0))
            .collect();
        Envelope { centers, width }
    }

    /// Value in `[0, 1]` at time `t` seconds.
    pub fn at(&self, t: f64) -> f64 {
        let mut v: f64 = 0.0;
        for &c in &self.centers {
            let d = (t - c) / self.width;
            if d.abs() < 0.5 {
                let b = libm::cos(PI * d);
                v = v.max(b * b);
            }
        }
        v
    }

    pub fn syllables(&self) -> usize {
        self.centers.len()
    }
}

/// A generated clip: its record, waveform and the parameters needed to
/// render its video on demand.
#[derive(Clone, Debug)]
pub struct SyntheticClip {
    pub record: ClipRecord,
    pub class: usize,
    pub speaker: usize,
    pub waveform: Waveform,
    pub envelope: Envelope,
    pub style: SpeakerStyle,
    n_classes: usize,
    n_video_frames: usize,
}

/// Feature frames of a clip of `samples` audio samples (25 ms / 10 ms).
fn feature_frames(samples: usize) -> usize {
    let (win, hop) = (SAMPLE_RATE as usize / 40, SAMPLE_RATE as usize / 100);
    if samples < win {
        0
    } else {
        1 + (samples - win) / hop
    }
}

/// Center time of feature frame `i`.
pub fn feature_frame_time(i: usize) -> f64 {
    (i as f64 * 160.0 + 200.0) / SAMPLE_RATE as f64
}

impl SyntheticClip {
    pub fn num_video_frames(&self) -> usize {
        self.n_video_frames
    }

    /// Envelope at the time of video frame `j` (aligned with feature frame 4j).
    pub fn envelope_at_video_frame(&self, j: usize) -> f64 {
        self.envelope.at(feature_frame_time(4 * j))
    }

    /// Mouth opening in pixels at video frame `j`.
    pub fn mouth_height(&self, j: usize) -> f64 {
        MOUTH_MIN + MOUTH_GAIN * self.envelope_at_video_frame(j)
    }

    /// `[3, 64, 128]` frame with values in `[-1, 1]`.
    pub fn frame(&self, j: usize) -> Tensor {
        let (h, w) = (FRAME_HEIGHT, FRAME_WIDTH);
        let mut data = vec![0.0; FRAME_CHANNELS * h * w];
        let mh = self.mouth_height(j);
        let (top, bottom) = (MOUTH_ROW - mh / 2.0, MOUTH_ROW + mh / 2.0);
        for c in 0..FRAME_CHANNELS {
            for y in 0..h {
                let cover = (bottom.min(y as f64 + 1.0) - top.max(y as f64)).clamp(0.0, 1.0);
                for x in 0..w {
                    let mut v = self.style.background(c, y, x);
                    if y < EXPR_ROWS && x < EXPR_COLS {
                        v = expression_template(self.class, self.n_classes, y, x);
                    } else if (MOUTH_COLS.0..MOUTH_COLS.1).contains(&x) {
                        v = v * (1.0 - cover) + MOUTH_COLOR[c] * cover;
                    }
                    data[(c * h + y) * w + x] = v.clamp(-1.0, 1.0);
                }
            }
        }
        Tensor::from_vec(&[FRAME_CHANNELS, h, w], data).expect("frame size")
    }

    pub fn video(&self) -> VideoTensor {
        let frames: Vec<Tensor> = (0..self.n_video_frames).map(|j| self.frame(j)).collect();
        let refs: Vec<&Tensor> = frames.iter().collect();
        VideoTensor(crate::models::stack(&refs).expect("equal frames"))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub clips: Vec<SyntheticClip>,
}

impl SyntheticDataset {
    pub fn records(&self) -> Vec<ClipRecord> {
        self.clips.iter().map(|c| c.record.clone()).collect()
    }

    pub fn split(&self, s: Split) -> Vec<&SyntheticClip> {
        self.clips.iter().filter(|c| c.record.split == s).collect()
    }

    pub fn by_id(&self, id: &str) -> Option<&SyntheticClip> {
        self.clips.iter().find(|c| c.record.clip_id == id)
    }
}

/// Generate the corpus. Audio: a rising harmonic tone at
/// `(200 + 120 c) Hz` times a speaker pitch factor, voiced throughout and
/// swelling on each of `c + 1` syllables, over a faint noise floor. Video: speaker
/// texture, a class pattern in the top-left corner and a mouth whose
/// opening follows the envelope.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let sr = SAMPLE_RATE as f64;
    let n_samples = libm::round(spec.clip_seconds * sr) as usize;
    let t_feat = feature_frames(n_samples);
    let n_video = t_feat.div_ceil(4);
    let floor = Normal::new(0.0, 0.002).expect("valid sigma");
    let mut clips = Vec::new();
    for s in 0..spec.n_speakers {
        let style = SpeakerStyle::draw(spec.seed, s, spec.pitch_spread);
        for c in 0..spec.n_classes {
            for k in 0..spec.clips_per_class {
                let clip_id = format!("s{s:03}_c{c}_{k:02}");
                let mut r = rng::stream(spec.seed, &clip_id);
                let env = Envelope::draw(c, spec.n_classes, spec.clip_seconds, &mut r);
                let amp = r.random_range(0.5..0.9);
                let f0 = (200.0 + 120.0 * c as f64) * style.pitch * r.random_range(0.97..1.03);
                let hsum: f64 = style.harmonics.iter().sum();
                let mut phase = r.random_range(0.0..2.0 * PI);
                let samples: Vec<f64> = (0..n_samples)
                    .map(|i| {
                        let t = i as f64 / sr;
                        let f = f0 * libm::pow(spec.glide, t / spec.clip_seconds);
                        phase += 2.0 * PI * f / sr;
                        let tone: f64 = style
                            .harmonics
                            .iter()
                            .enumerate()
                            .map(|(h, w)| w * libm::sin((h + 1) as f64 * phase))
                            .sum::<f64>()
                            / hsum;
                        (amp * (VOICING_FLOOR + (1.0 - VOICING_FLOOR) * env.at(t)) * tone + floor.sample(&mut r)).clamp(-1.0, 1.0)
                    })
                    .collect();
                let affect: Vec<f64> = (0..t_feat).map(|i| env.at(feature_frame_time(i))).collect();
                let record = ClipRecord {
                    clip_id: clip_id.clone(),
                    speaker_id: format!("spk{s:03}"),
                    audio_path: format!("audio/{clip_id}.wav"),
                    video_path: Some(format!("video/{clip_id}.vid")),
                    label: Some(c),
                    affect_track: Some(affect),
                    split: Split::Train,
                };
                clips.push(SyntheticClip {
                    record,
                    class: c,
                    speaker: s,
                    waveform: Waveform::new(samples, SAMPLE_RATE)?,
                    envelope: env,
                    style: style.clone(),
                    n_classes: spec.n_classes,
                    n_video_frames: n_video,
                });
            }
        }
    }
    let records: Vec<ClipRecord> = clips.iter().map(|c| c.record.clone()).collect();
    let split = split_speakers(&records, spec.split_ratios, spec.seed)?;
    for (c, r) in clips.iter_mut().zip(split) {
        c.record.split = r.split;
    }
    Ok(SyntheticDataset { spec: spec.clone(), clips })
}
