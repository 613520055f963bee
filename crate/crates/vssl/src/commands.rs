//! One function per command. Each validates, computes through the cached
//! pipeline stages and writes its report under `reports/`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;
use vssl_core::data::generate_synthetic;
use vssl_core::metrics::RunReport;
use vssl_core::train::Mode;

use crate::config::{ExperimentConfig, Method, Pretext, TaskKind};
use crate::error::{Error, Result};
use crate::pipeline::{MethodRuns, Session, Workspace};
use crate::plot::{line_chart, Series};
use crate::report::*;
use crate::video::{self, ByteVideo};
use crate::{audio, fsio, manifest};

/// A written report and every file the command produced.
#[derive(Debug)]
pub struct Written<T> {
    pub report: Report<T>,
    /// The JSON report first, then any CSV or SVG companions.
    pub files: Vec<PathBuf>,
}

struct Builder<'a> {
    s: &'a Session,
    command: &'static str,
    artifacts: BTreeMap<String, String>,
    warnings: Vec<String>,
    files: Vec<PathBuf>,
}

impl<'a> Builder<'a> {
    fn new(s: &'a Session, command: &'static str) -> Self {
        let mut b = Builder { s, command, artifacts: BTreeMap::new(), warnings: Vec::new(), files: Vec::new() };
        b.artifact("report", &b.path("json"));
        b
    }

    fn path(&self, ext: &str) -> PathBuf {
        report_path(&self.s.ws.reports(), self.command, ext)
    }

    fn artifact(&mut self, name: impl Into<String>, p: &Path) {
        self.artifacts.insert(name.into(), self.s.ws.rel(p));
    }

    fn runs(&mut self, label: &str, r: &MethodRuns) {
        if let Some(c) = &r.checkpoint {
            self.artifact(format!("checkpoint/{label}"), c);
        }
        if let Some(f) = &r.features {
            self.artifact(format!("features/{label}"), f);
        }
    }

    fn companion(&mut self, ext: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(ext);
        fsio::write_atomic(&p, bytes)?;
        self.artifact(ext, &p);
        self.files.push(p);
        Ok(())
    }

    fn finish<T: Serialize>(self, result: T) -> Result<Written<T>> {
        let report = Report {
            command: self.command.into(),
            code_hash: CODE_HASH.into(),
            config: self.s.cfg.clone(),
            model: self.s.model.clone(),
            artifacts: self.artifacts,
            warnings: self.warnings,
            result,
        };
        let p = report_path(&self.s.ws.reports(), self.command, "json");
        fsio::write_json(&p, &report)?;
        let mut files = vec![p];
        files.extend(self.files);
        Ok(Written { report, files })
    }
}

fn require_pretext(s: &Session, command: &str) -> Result<Pretext> {
    match s.cfg.pretext {
        Pretext::None => Err(Error::Config(format!("pretext: {command} needs a pretext task, not none"))),
        p => Ok(p),
    }
}

fn summary(s: &Session, r: &MethodRuns) -> MethodSummary {
    let m = s.metric_name();
    let acc: Option<Vec<f64>> = r.outcomes.iter().map(|o| o.test_accuracy).collect();
    MethodSummary {
        method: r.method.to_string(),
        test: r.test(m),
        val: r.val(m),
        test_accuracy: acc.map(|a| RunReport::new("accuracy", a, r.seeds.clone())),
        best_epochs: r.outcomes.iter().map(|o| o.best_epoch).collect(),
    }
}

fn few_runs(b: &mut Builder) {
    if b.s.cfg.n_runs < 2 {
        b.warnings.push("n_runs: paired t-tests need at least two runs".into());
    }
}

/// Pretrain the configured pretext task (or initialise randomly for
/// `none`). A matching checkpoint is reused unless `force` is set.
pub fn cmd_pretrain(s: &Session, force: bool) -> Result<Written<PretrainResult>> {
    let mut b = Builder::new(s, "pretrain");
    let ck = s.ensure_checkpoint(s.cfg.pretext, s.cfg.alpha, 1.0, force)?;
    b.artifact("checkpoint", &ck.path);
    b.finish(PretrainResult {
        pretext: s.cfg.pretext.name().into(),
        alpha: (s.cfg.pretext == Pretext::L1Odd).then_some(s.cfg.alpha),
        train_clips: ck.meta.train_clips,
        history: ck.meta.history,
        heldout: ck.meta.heldout,
    })
}

/// Frozen encoder features of every downstream clip.
pub fn cmd_extract(s: &Session) -> Result<Written<ExtractResult>> {
    let mut b = Builder::new(s, "extract");
    let ck = s.ensure_checkpoint(s.cfg.pretext, s.cfg.alpha, 1.0, false)?;
    let (dir, clips) = s.ensure_features(Some(&ck.path))?;
    b.artifact("checkpoint", &ck.path);
    b.artifact("features", &dir);
    let source = crate::features::read_index(&dir)?.source;
    b.finish(ExtractResult { clips: clips.len(), dim: clips.first().map_or(0, |c| c.features.dim(1)), source })
}

/// Downstream runs of the primary method and every comparison method, with
/// paired t-tests of the primary against each.
pub fn cmd_eval(s: &Session) -> Result<Written<EvalResult>> {
    let mut b = Builder::new(s, "eval");
    few_runs(&mut b);
    let mut methods = Vec::new();
    for m in s.cfg.methods() {
        let r = s.run_method(m, s.cfg.alpha, 1.0)?;
        b.runs(&m.to_string(), &r);
        methods.push(summary(s, &r));
    }
    let comparisons =
        methods.iter().skip(1).map(|o| Comparison::new(&methods[0].method, &methods[0].test, &o.method, &o.test)).collect();
    b.finish(EvalResult { metric: s.metric_name().into(), methods, comparisons })
}

/// Grid values in order with exact repeats removed.
pub fn dedup_grid(grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mut keep, mut dropped) = (Vec::new(), Vec::new());
    for &a in grid {
        if keep.contains(&a) {
            dropped.push(a);
        } else {
            keep.push(a);
        }
    }
    (keep, dropped)
}

/// Combined-task weight sweep, selected on validation accuracy (or CCC
/// for regression).
pub fn cmd_ablate_alpha(s: &Session) -> Result<Written<AlphaResult>> {
    let mut b = Builder::new(s, "ablate-alpha");
    if s.cfg.mode == Mode::Scratch {
        return Err(Error::Config("mode: ablate-alpha needs pretrained weights, not scratch".into()));
    }
    let (grid, dropped) = dedup_grid(&s.cfg.alpha_grid);
    for a in dropped {
        b.warnings.push(format!("alpha_grid: duplicate value {a} dropped"));
    }
    let method = Method::Encoder { pretext: Pretext::L1Odd, mode: s.cfg.mode };
    let classify = s.cfg.task == TaskKind::Classify;
    let mut rows = Vec::new();
    for &alpha in &grid {
        let r = s.run_method(method, alpha, 1.0)?;
        b.runs(&format!("alpha={}", num(alpha)), &r);
        let val_accuracy = if classify {
            let acc = r
                .outcomes
                .iter()
                .map(|o| o.evaluate(&r.data.val).map(|(_, a)| a.unwrap_or(f64::NAN)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Some(RunReport::new("accuracy", acc, r.seeds.clone()))
        } else {
            None
        };
        rows.push(AlphaRow { alpha, val_accuracy, val: r.val(s.metric_name()), test: r.test(s.metric_name()), best: false });
    }
    let score = |r: &AlphaRow| r.val_accuracy.as_ref().unwrap_or(&r.val).mean;
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if score(r) > score(&rows[best]) {
            best = i;
        }
    }
    rows[best].best = true;
    let best_alpha = rows[best].alpha;
    let header = ["alpha", "val_selection_mean", "val_selection_std", "test_mean", "test_std", "best"];
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let sel = r.val_accuracy.as_ref().unwrap_or(&r.val);
            vec![num(r.alpha), num(sel.mean), num(sel.std), num(r.test.mean), num(r.test.std), r.best.to_string()]
        })
        .collect();
    b.companion("csv", &csv_bytes(&header, &table)?)?;
    let selection = if classify { "val_accuracy" } else { "val_ccc" };
    b.finish(AlphaResult { metric: s.metric_name().into(), selection: selection.into(), rows, best_alpha })
}

/// Test metric of every method under babble noise at each SNR, next to
/// the clean reference. The models are those trained on clean data.
pub fn cmd_ablate_noise(s: &Session) -> Result<Written<NoiseResult>> {
    let mut b = Builder::new(s, "ablate-noise");
    let metric = s.metric_name();
    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    for m in s.cfg.methods() {
        let r = s.run_method(m, s.cfg.alpha, 1.0)?;
        b.runs(&m.to_string(), &r);
        seeds = r.seeds.clone();
        let clean = r.test(metric);
        rows.push(NoiseRow { method: m.to_string(), snr_db: None, values: clean.values, mean: clean.mean, std: clean.std });
        for &snr in &s.cfg.snr_list {
            let xs = s.noisy_test_inputs(&r, snr)?;
            let values = r.outcomes.iter().map(|o| o.evaluate(&xs).map(|v| v.0)).collect::<std::result::Result<Vec<_>, _>>()?;
            let rep = RunReport::new(metric, values, r.seeds.clone());
            rows.push(NoiseRow { method: m.to_string(), snr_db: Some(snr), values: rep.values, mean: rep.mean, std: rep.std });
        }
    }
    let mut header = vec!["method".to_string(), "snr_db".into(), "mean".into(), "std".into()];
    header.extend((0..s.cfg.n_runs).map(|i| format!("run_{i}")));
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = vec![r.method.clone(), r.snr_db.map_or("clean".into(), num), num(r.mean), num(r.std)];
            line.extend(r.values.iter().map(|&v| num(v)));
            line
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    b.companion("csv", &csv_bytes(&header_refs, &table)?)?;
    let methods: Vec<String> = s.cfg.methods().iter().map(Method::to_string).collect();
    let series: Vec<Series> = methods
        .iter()
        .map(|m| Series {
            name: m.clone(),
            points: rows.iter().filter(|r| &r.method == m).filter_map(|r| r.snr_db.map(|x| (x, r.mean))).collect(),
        })
        .collect();
    let refs: Vec<(String, f64)> =
        rows.iter().filter(|r| r.snr_db.is_none()).map(|r| (format!("{} clean", r.method), r.mean)).collect();
    b.companion("svg", line_chart("Metric under babble noise", "SNR (dB)", metric, &series, &refs).as_bytes())?;
    b.finish(NoiseResult { metric: metric.into(), babble_talkers: s.cfg.babble_talkers, seeds, rows })
}

/// Primary method pretrained on growing fractions of the pretraining clips.
pub fn cmd_ablate_size(s: &Session) -> Result<Written<SizeResult>> {
    let mut b = Builder::new(s, "ablate-size");
    require_pretext(s, "ablate-size")?;
    let method = s.cfg.primary();
    let mut fractions = s.cfg.fraction_list.clone();
    fractions.sort_by(f64::total_cmp);
    let (fractions, dropped) = dedup_grid(&fractions);
    for f in dropped {
        b.warnings.push(format!("fraction_list: duplicate value {f} dropped"));
    }
    let mut subsets: Vec<BTreeSet<String>> = Vec::new();
    let mut rows = Vec::new();
    for &f in &fractions {
        let ids: BTreeSet<String> = s.pretrain_records(f)?.into_iter().map(|r| r.clip_id).collect();
        let r = s.run_method(method, s.cfg.alpha, f)?;
        b.runs(&format!("fraction={}", num(f)), &r);
        rows.push(SizeRow { fraction: f, pretrain_clips: ids.len(), test: r.test(s.metric_name()) });
        subsets.push(ids);
    }
    let nested = subsets.windows(2).all(|w| w[0].is_subset(&w[1]));
    let header = ["fraction", "pretrain_clips", "test_mean", "test_std"];
    let table: Vec<Vec<String>> =
        rows.iter().map(|r| vec![num(r.fraction), r.pretrain_clips.to_string(), num(r.test.mean), num(r.test.std)]).collect();
    b.companion("csv", &csv_bytes(&header, &table)?)?;
    let series = [Series { name: method.to_string(), points: rows.iter().map(|r| (r.fraction, r.test.mean)).collect() }];
    b.companion("svg", line_chart("Metric against pretraining size", "fraction of pretraining clips", s.metric_name(), &series, &[]).as_bytes())?;
    b.finish(SizeResult { metric: s.metric_name().into(), method: method.to_string(), nested, rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VideoFormat {
    Raw,
    Png,
}

/// Write the configured synthetic corpus as WAV files, videos and a
/// manifest under `out`. Returns the manifest path.
pub fn cmd_synth_data(cfg: &ExperimentConfig, out: &Path, format: VideoFormat) -> Result<PathBuf> {
    let spec = cfg.data.synthetic.as_ref().ok_or_else(|| Error::Config("data: synth-data needs a `synthetic` data section".into()))?;
    spec.validate().map_err(|e| Error::Config(format!("data.synthetic: {e}")))?;
    let ds = generate_synthetic(spec).map_err(Error::Invalid)?;
    let mut records = Vec::with_capacity(ds.clips.len());
    for c in &ds.clips {
        let mut r = c.record.clone();
        let id = r.clip_id.clone();
        r.audio_path = format!("audio/{id}.wav");
        audio::write_wav(&out.join(&r.audio_path), &c.waveform)?;
        let v = ByteVideo::from_source(c)?;
        let vp = match format {
            VideoFormat::Raw => {
                let p = format!("video/{id}.vid");
                video::write_raw(&out.join(&p), &v)?;
                p
            }
            VideoFormat::Png => {
                let p = format!("video/{id}");
                video::write_png_dir(&out.join(&p), &v)?;
                p
            }
        };
        r.video_path = Some(vp);
        records.push(r);
    }
    let path = out.join("manifest.jsonl");
    manifest::write(&path, &records)?;
    Ok(path)
}

fn md_report(r: &RunReport) -> String {
    format!("{:.4} ± {:.4}", r.mean, r.std)
}

fn md_p(c: &Comparison) -> String {
    c.p.map_or_else(|| c.note.clone().unwrap_or_default(), |p| format!("{p:.4}"))
}

/// Collect every JSON report in the work directory into `reports/summary.md`.
pub fn cmd_report(work: &Path) -> Result<PathBuf> {
    let ws = Workspace::new(work);
    let dir = ws.reports();
    let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    names.sort();
    let mut md = String::from("# Experiment summary\n");
    for p in &names {
        let v: serde_json::Value = fsio::read_json(p)?;
        let command = v.get("command").and_then(|c| c.as_str()).unwrap_or("?").to_string();
        let hash = v.get("code_hash").and_then(|c| c.as_str()).unwrap_or("?");
        md.push_str(&format!("\n## {command}\n\nReport `{}`, code `{}`.\n\n", ws.rel(p), &hash[..hash.len().min(16)]));
        let result = v.get("result").cloned().unwrap_or_default();
        let bad = |e: serde_json::Error| Error::format(p, e.to_string());
        match command.as_str() {
            "pretrain" => {
                let r: PretrainResult = serde_json::from_value(result).map_err(bad)?;
                md.push_str(&format!("Pretext `{}` on {} clips, {} epochs.\n", r.pretext, r.train_clips, r.history.len()));
                if let Some(last) = r.history.last() {
                    md.push_str(&format!("Final training loss {:.5}.\n", last.total));
                }
                if let Some(a) = r.heldout.odd_accuracy {
                    md.push_str(&format!("Held-out odd-one-out accuracy {a:.4}.\n"));
                }
                if let Some(l) = r.heldout.l1 {
                    md.push_str(&format!("Held-out reconstruction loss {l:.5}.\n"));
                }
            }
            "extract" => {
                let r: ExtractResult = serde_json::from_value(result).map_err(bad)?;
                md.push_str(&format!("{} clips of {}-d features from `{}`.\n", r.clips, r.dim, r.source));
            }
            "eval" => {
                let r: EvalResult = serde_json::from_value(result).map_err(bad)?;
                md.push_str(&format!("| method | test {} | val {} |\n|---|---|---|\n", r.metric, r.metric));
                for m in &r.methods {
                    md.push_str(&format!("| {} | {} | {} |\n", m.method, md_report(&m.test), md_report(&m.val)));
                }
                for c in &r.comparisons {
                    md.push_str(&format!("\n{} vs {}: difference {:+.4}, p = {}", c.a, c.b, c.mean_difference, md_p(c)));
                }
                md.push('\n');
            }
            "ablate-alpha" => {
                let r: AlphaResult = serde_json::from_value(result).map_err(bad)?;
                md.push_str(&format!("| alpha | {} | test {} |\n|---|---|---|\n", r.selection, r.metric));
                for row in &r.rows {
                    let sel = row.val_accuracy.as_ref().unwrap_or(&row.val);
                    let mark = if row.best { " (best)" } else { "" };
                    md.push_str(&format!("| {}{mark} | {} | {} |\n", num(row.alpha), md_report(sel), md_report(&row.test)));
                }
            }
            "ablate-noise" => {
                let r: NoiseResult = serde_json::from_value(result).map_err(bad)?;
                md.push_str(&format!("| method | SNR (dB) | {} |\n|---|---|---|\n", r.metric));
                for row in &r.rows {
                    let snr = row.snr_db.map_or("clean".into(), num);
                    md.push_str(&format!("| {} | {snr} | {:.4} ± {:.4} |\n", row.method, row.mean, row.std));
                }
            }
            "ablate-size" => {
                let r: SizeResult = serde_json::from_value(result).map_err(bad)?;
                md.push_str(&format!("Method `{}`; subsets nested: {}.\n\n", r.method, r.nested));
                md.push_str(&format!("| fraction | clips | test {} |\n|---|---|---|\n", r.metric));
                for row in &r.rows {
                    md.push_str(&format!("| {} | {} | {} |\n", num(row.fraction), row.pretrain_clips, md_report(&row.test)));
                }
            }
            _ => md.push_str("Unrecognised report.\n"),
        }
        if let Some(w) = v.get("warnings").and_then(|w| w.as_array()).filter(|w| !w.is_empty()) {
            md.push_str("\nWarnings:\n");
            for x in w {
                md.push_str(&format!("- {}\n", x.as_str().unwrap_or("")));
            }
        }
    }
    let out = dir.join("summary.md");
    fsio::write_atomic(&out, md.as_bytes())?;
    Ok(out)
}
