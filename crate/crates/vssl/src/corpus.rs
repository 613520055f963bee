//! Clips held in memory for an experiment: waveform, log-mel frames,
//! annotations and, when available, video.

use std::path::Path;

use sha2::{Digest, Sha256};
use vssl_core::data::{generate_synthetic, ClipRecord, Split};
use vssl_core::signal::{compute_log_mel, mix_at_snr, synth_babble, Waveform};
use vssl_core::tensor::Tensor;
use vssl_core::train::VideoSource;

use crate::config::DataRef;
use crate::error::{Error, Result};
use crate::{audio, manifest, video};

pub struct Clip {
    pub record: ClipRecord,
    pub waveform: Waveform,
    /// `[t, 80]` log-mel frames.
    pub mel: Tensor,
    pub video: Option<Box<dyn VideoSource>>,
}

pub struct Corpus {
    pub clips: Vec<Clip>,
    /// Content identity used in cache keys.
    pub key: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn crop_rows(x: &Tensor, t: usize) -> Tensor {
    let d = x.dim(1);
    Tensor::from_vec(&[t, d], x.data()[..t * d].to_vec()).expect("crop within bounds")
}

impl Corpus {
    /// Load clips. With `need_video`, every record must name a video.
    pub fn load(data: &DataRef, stride: usize, need_video: bool) -> Result<Corpus> {
        match (&data.manifest, &data.synthetic) {
            (None, Some(spec)) => {
                let ds = generate_synthetic(spec).map_err(Error::Invalid)?;
                let key = format!("synthetic:{}", serde_json::to_string(spec).expect("spec serialises"));
                let mut clips = Vec::with_capacity(ds.clips.len());
                for c in ds.clips {
                    let mel = compute_log_mel(&c.waveform)?.into_tensor();
                    clips.push(Clip { record: c.record.clone(), waveform: c.waveform.clone(), mel, video: Some(Box::new(c)) });
                }
                Ok(Corpus { clips, key })
            }
            (Some(path), None) => load_manifest(path, stride, need_video),
            _ => Err(Error::Config("data: set exactly one of `manifest` or `synthetic`".into())),
        }
    }

    pub fn records(&self) -> Vec<ClipRecord> {
        self.clips.iter().map(|c| c.record.clone()).collect()
    }

    pub fn split(&self, s: Split) -> Vec<&Clip> {
        self.clips.iter().filter(|c| c.record.split == s).collect()
    }

    pub fn has_video(&self) -> bool {
        self.clips.iter().all(|c| c.video.is_some())
    }

    pub fn key_hash(&self) -> String {
        sha256_hex(self.key.as_bytes())[..16].to_string()
    }

    /// Log-mel frames of every clip of `s` after adding babble at `snr_db`.
    /// Each clip's babble mixes other clips of the same split and depends
    /// only on the clip id and `seed`.
    pub fn noisy_mels(&self, s: Split, snr_db: f64, talkers: usize, seed: u64) -> Result<Vec<Tensor>> {
        let members = self.split(s);
        let mut out = Vec::with_capacity(members.len());
        for (i, c) in members.iter().enumerate() {
            let pool: Vec<Waveform> = members.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| o.waveform.clone()).collect();
            let m = talkers.min(pool.len());
            if m == 0 {
                return Err(Error::Core(vssl_core::Error::EmptyPool));
            }
            let bseed = vssl_core::rng::derive_str(seed, &format!("babble/{}", c.record.clip_id));
            let babble = synth_babble(&pool, m, c.waveform.len(), bseed)?;
            let mix = mix_at_snr(&c.waveform, &babble, snr_db)?;
            let mel = compute_log_mel(&mix)?.into_tensor();
            out.push(crop_rows(&mel, c.mel.dim(0)));
        }
        Ok(out)
    }
}

fn load_manifest(path: &Path, stride: usize, need_video: bool) -> Result<Corpus> {
    let bytes = crate::fsio::read(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::format(path, "manifest is not UTF-8"))?;
    let records = manifest::parse(&text, path)?;
    if need_video {
        if let Some(r) = records.iter().find(|r| r.video_path.is_none()) {
            return Err(Error::Invalid(vssl_core::Error::MissingModality(format!(
                "clip '{}' has no video_path but the pretext task reconstructs video",
                r.clip_id
            ))));
        }
    }
    let mut clips = Vec::with_capacity(records.len());
    for mut record in records {
        let waveform = audio::read_wav(&manifest::resolve(path, &record.audio_path))?;
        let mut mel = compute_log_mel(&waveform)?.into_tensor();
        let t0 = mel.dim(0);
        let mut vid = None;
        if let Some(vp) = &record.video_path {
            let mut v = video::read_video(&manifest::resolve(path, vp))?;
            // Trim whichever stream runs longer so that frames pair up.
            let t = mel.dim(0).min(v.num_frames() * stride);
            mel = crop_rows(&mel, t);
            v.truncate(t.div_ceil(stride));
            vid = Some(Box::new(v) as Box<dyn VideoSource>);
        }
        let t = mel.dim(0);
        if let Some(a) = record.affect_track.as_mut() {
            if a.len() == t0 && t0 >= t {
                a.truncate(t);
            } else if a.len() != t {
                return Err(Error::Invalid(vssl_core::Error::Alignment(format!(
                    "clip '{}': affect track has {} values for {t} frames",
                    record.clip_id,
                    a.len()
                ))));
            }
        }
        clips.push(Clip { record, waveform, mel, video: vid });
    }
    Ok(Corpus { clips, key: format!("manifest:{}", sha256_hex(&bytes)) })
}
