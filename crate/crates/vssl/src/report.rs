//! Machine-readable reports written by every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vssl_core::metrics::RunReport;
use vssl_core::models::PretextModelConfig;
use vssl_core::train::EpochStats;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::pipeline::HeldOut;

/// Content hash of the library sources this binary was built from.
pub const CODE_HASH: &str = env!("VSSL_CODE_HASH");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub command: String,
    pub code_hash: String,
    pub config: ExperimentConfig,
    pub model: PretextModelConfig,
    /// Every file written or read, relative to the work directory.
    pub artifacts: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub result: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainResult {
    pub pretext: String,
    pub alpha: Option<f64>,
    pub train_clips: usize,
    pub history: Vec<EpochStats>,
    pub heldout: HeldOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractResult {
    pub clips: usize,
    pub dim: usize,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub test: RunReport,
    pub val: RunReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<RunReport>,
    pub best_epochs: Vec<usize>,
}

/// Paired t-test of `a` against `b` over matching run seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub mean_difference: f64,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub dof: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Comparison {
    pub fn new(a: &str, ra: &RunReport, b: &str, rb: &RunReport) -> Self {
        let mut c = Comparison { a: a.into(), b: b.into(), mean_difference: ra.mean - rb.mean, t: None, p: None, dof: None, note: None };
        match ra.compare(rb) {
            Ok(tt) => {
                c.t = Some(tt.t);
                c.p = Some(tt.p);
                c.dof = Some(tt.dof);
            }
            Err(e) => c.note = Some(e.to_string()),
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub methods: Vec<MethodSummary>,
    pub comparisons: Vec<Comparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    /// Validation accuracy of the selected models (classification only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<RunReport>,
    pub val: RunReport,
    pub test: RunReport,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaResult {
    pub metric: String,
    pub selection: String,
    pub rows: Vec<AlphaRow>,
    pub best_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub method: String,
    /// `None` for the clean reference.
    pub snr_db: Option<f64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseResult {
    pub metric: String,
    pub babble_talkers: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<NoiseRow>,
}

impl NoiseResult {
    pub fn row(&self, method: &str, snr_db: Option<f64>) -> Option<&NoiseRow> {
        self.rows.iter().find(|r| r.method == method && r.snr_db == snr_db)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub fraction: f64,
    pub pretrain_clips: usize,
    pub test: RunReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeResult {
    pub metric: String,
    pub method: String,
    /// Whether each smaller pretraining subset lies inside every larger one.
    pub nested: bool,
    pub rows: Vec<SizeRow>,
}

pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Config(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

/// Shortest round-tripping decimal, as in the JSON reports.
pub fn num(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| "null".into())
}

/// `<reports>/<name>.<ext>`.
pub fn report_path(reports: &Path, name: &str, ext: &str) -> PathBuf {
    reports.join(format!("{name}.{ext}"))
}
