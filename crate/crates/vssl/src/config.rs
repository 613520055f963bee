//! Experiment configuration: TOML file over built-in defaults, with
//! command-line overrides applied on top and a full validation pass before
//! any compute.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vssl_core::data::SyntheticSpec;
use vssl_core::models::{BgruConfig, PretextModelConfig};
use vssl_core::pretext::DEFAULT_GROUP_SIZE;
use vssl_core::train::{DownstreamSchedule, Mode, PretextTask, PretrainSchedule};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.17, 0.33, 0.50, 0.67, 0.83];
pub const DEFAULT_SNR_LIST: [f64; 6] = [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0];
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// Pretext objective, or `none` for a randomly initialised encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pretext {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "odd")]
    Odd,
    #[serde(rename = "l1+odd")]
    L1Odd,
}

impl Pretext {
    pub fn task(self) -> Option<PretextTask> {
        match self {
            Pretext::None => None,
            Pretext::L1 => Some(PretextTask::L1),
            Pretext::Odd => Some(PretextTask::Odd),
            Pretext::L1Odd => Some(PretextTask::L1Odd),
        }
    }

    pub fn name(self) -> &'static str {
        self.task().map_or("none", PretextTask::name)
    }
}

impl FromStr for Pretext {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Pretext::None),
            "l1" => Ok(Pretext::L1),
            "odd" => Ok(Pretext::Odd),
            "l1+odd" => Ok(Pretext::L1Odd),
            _ => Err(format!("unknown pretext '{s}' (expected none, l1, odd or l1+odd)")),
        }
    }
}

pub fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    match s {
        "frozen" => Ok(Mode::Frozen),
        "finetune" => Ok(Mode::Finetune),
        "scratch" => Ok(Mode::Scratch),
        _ => Err(format!("unknown mode '{s}' (expected frozen, finetune or scratch)")),
    }
}

pub fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Frozen => "frozen",
        Mode::Finetune => "finetune",
        Mode::Scratch => "scratch",
    }
}

/// A downstream feature pipeline: an audio encoder in some mode, or plain
/// MFCCs. Written `pretext:mode` (mode defaults to frozen), `scratch`, or
/// `mfcc`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Encoder { pretext: Pretext, mode: Mode },
    Mfcc,
}

impl Method {
    pub fn check(&self) -> std::result::Result<(), String> {
        match *self {
            Method::Mfcc => Ok(()),
            Method::Encoder { pretext, mode } => match (pretext, mode) {
                (Pretext::None, Mode::Finetune) => Err(format!("{self}: finetuning needs a pretext task")),
                (p, Mode::Scratch) if p != Pretext::None => Err(format!("{self}: scratch training never loads pretrained weights")),
                _ => Ok(()),
            },
        }
    }

    pub fn pretext(&self) -> Option<Pretext> {
        match *self {
            Method::Encoder { pretext, .. } => Some(pretext),
            Method::Mfcc => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Method::Mfcc => f.write_str("mfcc"),
            Method::Encoder { pretext: Pretext::None, mode: Mode::Scratch } => f.write_str("scratch"),
            Method::Encoder { pretext, mode } => write!(f, "{}:{}", pretext.name(), mode_name(mode)),
        }
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let m = match s {
            "mfcc" => Method::Mfcc,
            "scratch" => Method::Encoder { pretext: Pretext::None, mode: Mode::Scratch },
            _ => {
                let (p, m) = s.split_once(':').unwrap_or((s, "frozen"));
                Method::Encoder { pretext: p.parse()?, mode: parse_mode(m)? }
            }
        };
        m.check()?;
        Ok(m)
    }
}

impl TryFrom<String> for Method {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classify,
    Regress,
}

/// Where clips come from: a manifest file or the procedural generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DataRef {
    fn default() -> Self {
        DataRef { manifest: None, synthetic: Some(SyntheticSpec::default()) }
    }
}

/// A named preset (`desk` or `canonical`) or a complete model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Custom(PretextModelConfig),
}

impl ModelChoice {
    pub fn resolve(&self) -> Result<PretextModelConfig> {
        match self {
            ModelChoice::Preset(p) if p == "canonical" => Ok(PretextModelConfig::canonical()),
            ModelChoice::Preset(p) if p == "desk" => Ok(PretextModelConfig::desk()),
            ModelChoice::Preset(p) => Err(Error::Config(format!("model: unknown preset '{p}' (expected desk or canonical)"))),
            ModelChoice::Custom(c) => Ok(c.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub group_size: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let s = PretrainSchedule::default();
        PretrainSettings {
            lr0: s.lr0,
            decay: s.decay,
            decay_every: s.decay_every,
            epochs: s.epochs,
            batch_size: s.batch_size,
            group_size: DEFAULT_GROUP_SIZE,
        }
    }
}

impl PretrainSettings {
    pub fn schedule(&self) -> PretrainSchedule {
        PretrainSchedule {
            lr0: self.lr0,
            decay: self.decay,
            decay_every: self.decay_every,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamSettings {
    pub hidden: usize,
    pub layers: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of training clips whose labels are kept.
    pub label_fraction: f64,
}

impl Default for DownstreamSettings {
    fn default() -> Self {
        let s = DownstreamSchedule::default();
        let b = BgruConfig::canonical();
        DownstreamSettings {
            hidden: b.hidden,
            layers: b.layers,
            lr0: s.lr0,
            decay: s.decay,
            decay_every: s.decay_every,
            epochs: s.epochs,
            batch_size: s.batch_size,
            label_fraction: 1.0,
        }
    }
}

impl DownstreamSettings {
    pub fn schedule(&self) -> DownstreamSchedule {
        DownstreamSchedule {
            lr0: self.lr0,
            decay: self.decay,
            decay_every: self.decay_every,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }

    pub fn bgru(&self) -> BgruConfig {
        BgruConfig { hidden: self.hidden, layers: self.layers }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pretext: Pretext,
    /// Weight of the reconstruction loss in the combined objective.
    pub alpha: f64,
    pub mode: Mode,
    pub task: TaskKind,
    pub n_runs: usize,
    /// Methods compared against the primary `pretext:mode` one.
    pub compare: Vec<Method>,
    pub alpha_grid: Vec<f64>,
    pub snr_list: Vec<f64>,
    pub fraction_list: Vec<f64>,
    /// Talkers summed into one babble signal.
    pub babble_talkers: usize,
    /// Downstream clips.
    pub data: DataRef,
    /// Pretraining clips; the downstream data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_data: Option<DataRef>,
    pub model: ModelChoice,
    pub pretrain: PretrainSettings,
    pub downstream: DownstreamSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            pretext: Pretext::L1Odd,
            alpha: 0.67,
            mode: Mode::Frozen,
            task: TaskKind::Classify,
            n_runs: 10,
            compare: Vec::new(),
            alpha_grid: DEFAULT_ALPHA_GRID.to_vec(),
            snr_list: DEFAULT_SNR_LIST.to_vec(),
            fraction_list: DEFAULT_FRACTIONS.to_vec(),
            babble_talkers: 6,
            data: DataRef::default(),
            pretrain_data: None,
            model: ModelChoice::Preset("canonical".into()),
            pretrain: PretrainSettings::default(),
            downstream: DownstreamSettings::default(),
        }
    }
}

fn field(name: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

fn check_data(name: &str, d: &DataRef) -> Result<()> {
    match (&d.manifest, &d.synthetic) {
        (Some(_), None) => Ok(()),
        (None, Some(s)) => s.validate().map_err(|e| field(&format!("{name}.synthetic"), e)),
        _ => Err(field(name, "set exactly one of `manifest` or `synthetic`")),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn primary(&self) -> Method {
        Method::Encoder { pretext: self.pretext, mode: self.mode }
    }

    /// The primary method followed by the comparison methods, without repeats.
    pub fn methods(&self) -> Vec<Method> {
        let mut out = vec![self.primary()];
        for m in &self.compare {
            if !out.contains(m) {
                out.push(*m);
            }
        }
        out
    }

    pub fn pretrain_data(&self) -> &DataRef {
        self.pretrain_data.as_ref().unwrap_or(&self.data)
    }

    /// Check every field against the library contracts.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(field("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        self.primary().check().map_err(|e| field("pretext/mode", e))?;
        for (i, m) in self.compare.iter().enumerate() {
            m.check().map_err(|e| field(&format!("compare[{i}]"), e))?;
        }
        if self.n_runs == 0 {
            return Err(field("n_runs", "must be at least 1"));
        }
        if self.alpha_grid.is_empty() {
            return Err(field("alpha_grid", "must not be empty"));
        }
        if let Some(a) = self.alpha_grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(field("alpha_grid", format!("{a} outside [0, 1]")));
        }
        if self.snr_list.is_empty() || self.snr_list.iter().any(|s| !s.is_finite()) {
            return Err(field("snr_list", "must be a non-empty list of finite values"));
        }
        if self.fraction_list.is_empty() {
            return Err(field("fraction_list", "must not be empty"));
        }
        if let Some(f) = self.fraction_list.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(field("fraction_list", format!("{f} outside (0, 1]")));
        }
        if self.babble_talkers == 0 {
            return Err(field("babble_talkers", "must be at least 1"));
        }
        check_data("data", &self.data)?;
        if let Some(p) = &self.pretrain_data {
            check_data("pretrain_data", p)?;
        }
        let model = self.model.resolve()?;
        model.validate().map_err(|e| field("model", e))?;
        let p = &self.pretrain;
        p.schedule().validate().map_err(|e| field("pretrain", e))?;
        if p.group_size < 2 {
            return Err(field("pretrain.group_size", "must be at least 2"));
        }
        let needs_groups = self.methods().iter().any(|m| matches!(m.pretext(), Some(Pretext::Odd | Pretext::L1Odd)));
        if needs_groups && p.batch_size < p.group_size {
            return Err(field("pretrain.batch_size", format!("{} is smaller than group_size {}", p.batch_size, p.group_size)));
        }
        let d = &self.downstream;
        d.schedule().validate().map_err(|e| field("downstream", e))?;
        if d.hidden == 0 || d.layers == 0 {
            return Err(field("downstream", "hidden and layers must be positive"));
        }
        if !(d.label_fraction > 0.0 && d.label_fraction <= 1.0) {
            return Err(field("downstream.label_fraction", format!("{} outside (0, 1]", d.label_fraction)));
        }
        Ok(())
    }
}
