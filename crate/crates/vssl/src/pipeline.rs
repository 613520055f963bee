//! Cached experiment stages: pretraining to a checkpoint, feature
//! extraction to a store, and repeated downstream training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vssl_core::data::{subset_fraction, ClipRecord, Split, SubsetKind};
use vssl_core::metrics::RunReport;
use vssl_core::models::{AudioEncoder, PretextModel, PretextModelConfig, AUDIO_ENCODER};
use vssl_core::params::ParamStore;
use vssl_core::rng;
use vssl_core::signal::{mfcc_from_log_mel, LogMelSpectrogram};
use vssl_core::tensor::Tensor;
use vssl_core::train::{
    extract_features, l1_eval, odd_eval, pretrain, DownstreamConfig, DownstreamData, DownstreamOutcome, DownstreamTask,
    EpochStats, Example, Frontend, Mode, PretrainConfig, PretrainItem, PretextTask,
};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{ExperimentConfig, Method, Pretext, TaskKind};
use crate::corpus::{sha256_hex, Corpus};
use crate::error::{Error, Result};
use crate::features::{self, StoredClip};

/// Paths under the work directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// `p` relative to the work directory, with `/` separators.
    pub fn rel(&self, p: &Path) -> String {
        let r = p.strip_prefix(&self.root).unwrap_or(p);
        r.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }
}

/// Held-out pretext performance on the validation and test clips.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub odd_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub odd_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
}

/// Metadata stored in a checkpoint next to its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub key: serde_json::Value,
    pub model: PretextModelConfig,
    pub train_clips: usize,
    pub history: Vec<EpochStats>,
    pub heldout: HeldOut,
}

#[derive(Clone, Debug)]
pub struct CheckpointInfo {
    pub path: PathBuf,
    pub meta: CheckpointMeta,
}

/// Downstream results of one method over all runs.
pub struct MethodRuns {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub outcomes: Vec<DownstreamOutcome>,
    pub checkpoint: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// The splits the runs were trained and scored on.
    pub data: DownstreamData,
}

impl MethodRuns {
    pub fn test(&self, metric: &str) -> RunReport {
        RunReport::new(metric, self.outcomes.iter().map(|o| o.test_metric).collect(), self.seeds.clone())
    }

    pub fn val(&self, metric: &str) -> RunReport {
        RunReport::new(metric, self.outcomes.iter().map(|o| o.best_val).collect(), self.seeds.clone())
    }
}

pub struct Session {
    pub cfg: ExperimentConfig,
    pub model: PretextModelConfig,
    pub ws: Workspace,
    pub down: Corpus,
    /// Separate pretraining corpus, when configured.
    pre: Option<Corpus>,
    pub verbose: bool,
}

fn slug(p: Pretext) -> &'static str {
    match p {
        Pretext::None => "random",
        Pretext::L1 => "l1",
        Pretext::Odd => "odd",
        Pretext::L1Odd => "l1odd",
    }
}

impl Session {
    /// Validate the configuration and load the corpora.
    pub fn open(cfg: ExperimentConfig, work_dir: &Path) -> Result<Session> {
        cfg.validate()?;
        let model = cfg.model.resolve()?;
        let stride = model.video_stride;
        let needs_video = cfg.methods().iter().any(|m| matches!(m.pretext(), Some(Pretext::L1 | Pretext::L1Odd)));
        let (down, pre) = match &cfg.pretrain_data {
            Some(p) => (Corpus::load(&cfg.data, stride, false)?, Some(Corpus::load(p, stride, needs_video)?)),
            None => (Corpus::load(&cfg.data, stride, needs_video)?, None),
        };
        Ok(Session { cfg, model, ws: Workspace::new(work_dir), down, pre, verbose: false })
    }

    pub fn pre(&self) -> &Corpus {
        self.pre.as_ref().unwrap_or(&self.down)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self.cfg.task {
            TaskKind::Classify => "macro_f1",
            TaskKind::Regress => "ccc",
        }
    }

    /// Pretraining clips of the training split kept at `fraction`.
    pub fn pretrain_records(&self, fraction: f64) -> Result<Vec<ClipRecord>> {
        let recs = self.pre().records();
        let sub = subset_fraction(&recs, fraction, SubsetKind::PretrainClips, rng::derive_str(self.cfg.seed, "pretrain-subset"))
            .map_err(Error::Invalid)?;
        Ok(sub.into_iter().filter(|r| r.split == Split::Train).collect())
    }

    fn checkpoint_key(&self, pretext: Pretext, alpha: f64, fraction: f64) -> serde_json::Value {
        if pretext == Pretext::None {
            return serde_json::json!({ "pretext": "none", "seed": self.cfg.seed, "model": self.model });
        }
        serde_json::json!({
            "pretext": pretext.name(),
            "alpha": (pretext == Pretext::L1Odd).then_some(alpha),
            "fraction": fraction,
            "seed": self.cfg.seed,
            "model": self.model,
            "pretrain": self.cfg.pretrain,
            "data": self.pre().key,
        })
    }

    pub fn checkpoint_path(&self, pretext: Pretext, alpha: f64, fraction: f64) -> PathBuf {
        let key = self.checkpoint_key(pretext, alpha, fraction);
        let h = sha256_hex(key.to_string().as_bytes());
        self.ws.checkpoints().join(format!("{}-{}.ckpt", slug(pretext), &h[..16]))
    }

    /// The checkpoint for `pretext`, trained now unless a matching one
    /// exists (or `force` is set).
    pub fn ensure_checkpoint(&self, pretext: Pretext, alpha: f64, fraction: f64, force: bool) -> Result<CheckpointInfo> {
        let key = self.checkpoint_key(pretext, alpha, fraction);
        let path = self.checkpoint_path(pretext, alpha, fraction);
        if !force && path.exists() {
            if let Ok(ck) = Checkpoint::open(&path) {
                if let Ok(meta) = serde_json::from_value::<CheckpointMeta>(ck.meta().clone()) {
                    if meta.key == key {
                        return Ok(CheckpointInfo { path, meta });
                    }
                }
            }
        }
        let (store, meta) = match pretext.task() {
            None => {
                let (_, store) = PretextModel::new(&self.model, rng::derive_str(self.cfg.seed, "random-init"))?;
                (store, CheckpointMeta { key, model: self.model.clone(), train_clips: 0, history: Vec::new(), heldout: HeldOut::default() })
            }
            Some(task) => self.train_pretext(task, alpha, fraction, key)?,
        };
        let meta_json = serde_json::to_value(&meta).expect("meta serialises");
        checkpoint::save(&path, &store, &meta_json)?;
        Ok(CheckpointInfo { path, meta })
    }

    fn train_pretext(&self, task: PretextTask, alpha: f64, fraction: f64, key: serde_json::Value) -> Result<(ParamStore, CheckpointMeta)> {
        let keep: std::collections::BTreeSet<String> = self.pretrain_records(fraction)?.into_iter().map(|r| r.clip_id).collect();
        let corpus = self.pre();
        let train: Vec<&crate::corpus::Clip> = corpus.clips.iter().filter(|c| keep.contains(&c.record.clip_id)).collect();
        let items: Vec<PretrainItem> = train.iter().map(|c| item(c)).collect();
        let mut pcfg = PretrainConfig::new(task, self.model.clone(), self.cfg.pretrain.schedule(), rng::derive_str(self.cfg.seed, "pretrain"));
        pcfg.group_size = self.cfg.pretrain.group_size;
        if task == PretextTask::L1Odd {
            pcfg.alpha = alpha;
        }
        self.log(format!("pretraining {} on {} clips", task.name(), items.len()));
        let out = pretrain(&items, &pcfg, &mut |s| {
            self.log(format!("  epoch {:3} loss {:.5}", s.epoch, s.total));
        })?;

        let held: Vec<&crate::corpus::Clip> = corpus.clips.iter().filter(|c| c.record.split != Split::Train).collect();
        let mut heldout = HeldOut::default();
        let eval_seed = rng::derive_str(self.cfg.seed, "heldout");
        if task.uses_odd() && held.len() >= pcfg.group_size {
            let mels: Vec<&Tensor> = held.iter().map(|c| &c.mel).collect();
            let (l, a) = odd_eval(&out.store, &out.model, &mels, pcfg.group_size, eval_seed)?;
            heldout.odd_loss = Some(l);
            heldout.odd_accuracy = Some(a);
        }
        if task.needs_video() && !held.is_empty() {
            let hitems: Vec<PretrainItem> = held.iter().map(|c| item(c)).collect();
            heldout.l1 = Some(l1_eval(&out.store, &out.model, &hitems, eval_seed)?);
        }
        let meta = CheckpointMeta { key, model: self.model.clone(), train_clips: items.len(), history: out.history, heldout };
        Ok((out.store, meta))
    }

    /// Audio-encoder parameters from a checkpoint, in a store that also
    /// holds the matching encoder layout.
    pub fn load_encoder(&self, path: &Path) -> Result<(AudioEncoder, ParamStore)> {
        let mut ck = Checkpoint::open(path)?;
        let loaded = ck.load_prefix(AUDIO_ENCODER)?;
        let mut store = ParamStore::new();
        let enc = AudioEncoder::new(&mut store, &self.model.audio, &mut rng::from_seed(0));
        store.copy_prefix_from(&loaded, AUDIO_ENCODER)?;
        Ok((enc, store))
    }

    fn stored_clips(&self, feats: Vec<Tensor>) -> Vec<StoredClip> {
        self.down
            .clips
            .iter()
            .zip(feats)
            .map(|(c, f)| StoredClip {
                clip_id: c.record.clip_id.clone(),
                features: f,
                label: c.record.label,
                affect_track: c.record.affect_track.clone(),
                split: c.record.split,
            })
            .collect()
    }

    /// Frozen features of the downstream corpus: MFCCs or the encoder of
    /// `ckpt`. Always read back from the store, so cached and fresh runs
    /// see identical values.
    pub fn ensure_features(&self, ckpt: Option<&Path>) -> Result<(PathBuf, Vec<StoredClip>)> {
        let data = self.down.key_hash();
        let (dir, source) = match ckpt {
            None => (self.ws.features().join(format!("mfcc-{data}")), format!("mfcc/{data}")),
            Some(p) => {
                let (_, store) = self.load_encoder(p)?;
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (self.ws.features().join(format!("{stem}-{data}")), format!("{}/{data}", store.digest(AUDIO_ENCODER)))
            }
        };
        if let Ok(idx) = features::read_index(&dir) {
            if idx.source == source {
                return Ok((dir.clone(), features::read_store(&dir)?.1));
            }
        }
        let feats = match ckpt {
            None => self.down.clips.iter().map(|c| mfcc_of(&c.mel)).collect::<Result<Vec<_>>>()?,
            Some(p) => {
                let (enc, store) = self.load_encoder(p)?;
                let mels: Vec<&Tensor> = self.down.clips.iter().map(|c| &c.mel).collect();
                extract_features(&store, &enc, &mels)?
            }
        };
        self.log(format!("writing features to {}", dir.display()));
        features::write_store(&dir, &source, &self.stored_clips(feats))?;
        Ok((dir.clone(), features::read_store(&dir)?.1))
    }

    pub fn downstream_task(&self) -> Result<DownstreamTask> {
        Ok(match self.cfg.task {
            TaskKind::Regress => DownstreamTask::Regress,
            TaskKind::Classify => {
                let classes = self.down.clips.iter().filter_map(|c| c.record.label).max().map_or(0, |m| m + 1);
                if classes < 2 {
                    return Err(Error::Invalid(vssl_core::Error::MissingLabels("classification needs at least two labelled classes".into())));
                }
                DownstreamTask::Classify { classes }
            }
        })
    }

    /// Annotations after the label-fraction setting.
    fn annotations(&self) -> Result<BTreeMap<String, ClipRecord>> {
        let recs = subset_fraction(
            &self.down.records(),
            self.cfg.downstream.label_fraction,
            SubsetKind::Labels,
            rng::derive_str(self.cfg.seed, "label-subset"),
        )
        .map_err(Error::Invalid)?;
        Ok(recs.into_iter().map(|r| (r.clip_id.clone(), r)).collect())
    }

    /// Split examples from per-clip inputs in corpus order.
    pub fn downstream_data(&self, inputs: &BTreeMap<String, Tensor>) -> Result<DownstreamData> {
        let ann = self.annotations()?;
        let mut d = DownstreamData::default();
        for c in &self.down.clips {
            let r = &ann[&c.record.clip_id];
            let input = inputs
                .get(&r.clip_id)
                .ok_or_else(|| Error::Config(format!("no features for clip '{}'", r.clip_id)))?
                .clone();
            let ex = Example {
                input,
                label: r.label,
                target: if self.cfg.task == TaskKind::Regress { r.affect_track.clone() } else { None },
            };
            match r.split {
                Split::Train => d.train.push(ex),
                Split::Val => d.val.push(ex),
                Split::Test => d.test.push(ex),
            }
        }
        Ok(d)
    }

    pub fn downstream_config(&self, seed: u64) -> DownstreamConfig {
        DownstreamConfig { bgru: self.cfg.downstream.bgru(), schedule: self.cfg.downstream.schedule(), seed }
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        let master = rng::derive_str(self.cfg.seed, "downstream");
        (0..self.cfg.n_runs as u64).map(|i| rng::derive(master, i)).collect()
    }

    /// Train `method` downstream once per run seed.
    pub fn run_method(&self, method: Method, alpha: f64, fraction: f64) -> Result<MethodRuns> {
        let task = self.downstream_task()?;
        let seeds = self.run_seeds();
        let mut runs =
            MethodRuns { method, seeds: seeds.clone(), outcomes: Vec::new(), checkpoint: None, features: None, data: DownstreamData::default() };
        let (data, mode, enc_store) = match method {
            Method::Mfcc => {
                let (dir, clips) = self.ensure_features(None)?;
                runs.features = Some(dir);
                (self.downstream_data(&by_id(clips))?, Mode::Frozen, None)
            }
            Method::Encoder { pretext, mode: Mode::Frozen } => {
                let ck = self.ensure_checkpoint(pretext, alpha, fraction, false)?;
                let (dir, clips) = self.ensure_features(Some(&ck.path))?;
                runs.checkpoint = Some(ck.path);
                runs.features = Some(dir);
                (self.downstream_data(&by_id(clips))?, Mode::Frozen, None)
            }
            Method::Encoder { pretext, mode } => {
                let mels = self.down.clips.iter().map(|c| (c.record.clip_id.clone(), c.mel.clone())).collect();
                let store = if mode == Mode::Finetune {
                    let ck = self.ensure_checkpoint(pretext, alpha, fraction, false)?;
                    let (_, s) = self.load_encoder(&ck.path)?;
                    runs.checkpoint = Some(ck.path);
                    Some(s)
                } else {
                    None
                };
                (self.downstream_data(&mels)?, mode, store)
            }
        };
        for (i, &seed) in seeds.iter().enumerate() {
            let frontend = match (method, mode) {
                (Method::Encoder { .. }, Mode::Finetune | Mode::Scratch) => Frontend::Encoder { cfg: &self.model.audio, init: enc_store.as_ref() },
                _ => Frontend::Features,
            };
            let out = vssl_core::train::train_downstream(task, &data, mode, frontend, &self.downstream_config(seed))?;
            self.log(format!("{method} run {i}: val {:.4} test {:.4}", out.best_val, out.test_metric));
            runs.outcomes.push(out);
        }
        runs.data = data;
        Ok(runs)
    }

    /// Test-split inputs for `method` after adding babble at `snr_db`, in
    /// the form its downstream models expect.
    pub fn noisy_test_inputs(&self, runs: &MethodRuns, snr_db: f64) -> Result<Vec<Example>> {
        let mels = self.down.noisy_mels(Split::Test, snr_db, self.cfg.babble_talkers, rng::derive_str(self.cfg.seed, "babble"))?;
        let inputs: Vec<Tensor> = match runs.method {
            Method::Mfcc => mels.iter().map(|m| mfcc_of(m).map(round_f32)).collect::<Result<_>>()?,
            Method::Encoder { mode: Mode::Frozen, .. } => {
                let ck = runs.checkpoint.as_ref().expect("frozen encoder methods carry a checkpoint");
                let (enc, store) = self.load_encoder(ck)?;
                let refs: Vec<&Tensor> = mels.iter().collect();
                // Round through f32 exactly as the feature store does.
                extract_features(&store, &enc, &refs)?.into_iter().map(round_f32).collect()
            }
            Method::Encoder { .. } => mels,
        };
        let ann = self.annotations()?;
        let test = self.down.split(Split::Test);
        Ok(test
            .iter()
            .zip(inputs)
            .map(|(c, input)| {
                let r = &ann[&c.record.clip_id];
                Example {
                    input,
                    label: r.label,
                    target: if self.cfg.task == TaskKind::Regress { r.affect_track.clone() } else { None },
                }
            })
            .collect())
    }
}

fn item<'a>(c: &'a crate::corpus::Clip) -> PretrainItem<'a> {
    PretrainItem { mel: &c.mel, video: c.video.as_deref() }
}

fn by_id(clips: Vec<StoredClip>) -> BTreeMap<String, Tensor> {
    clips.into_iter().map(|c| (c.clip_id, c.features)).collect()
}

fn mfcc_of(mel: &Tensor) -> Result<Tensor> {
    Ok(mfcc_from_log_mel(&LogMelSpectrogram::new(mel.clone())?).into_tensor())
}

fn round_f32(t: Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::from_vec(t.shape(), data).expect("same shape")
}
