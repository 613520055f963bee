use rand::Rng as _;
use vssl_core::data::{generate_synthetic, SyntheticSpec};
use vssl_core::models::*;
use vssl_core::params::ParamStore;
use vssl_core::rng;
use vssl_core::signal::compute_log_mel;
use vssl_core::tensor::Tensor;
use vssl_core::train::*;
use vssl_core::Error;

fn within_ulp(a: f64, exact: f64) -> bool {
    (a - exact).abs() <= exact.abs() * f64::EPSILON
}

#[test]
fn pretrain_schedule_closed_form() {
    let s = PretrainSchedule::default();
    // 0.06 * 0.98^k for k = 0, 1, 4, 9, written out in decimal
    let exact = [(0, 0.06), (10, 0.0588), (40, 0.0553420896), (99, 0.05002486572780899328)];
    for (e, v) in exact {
        assert!(within_ulp(s.lr(e), v), "epoch {e}: {} vs {v}", s.lr(e));
    }
    assert_eq!(s.lr(9), s.lr(0));
    assert_eq!(s.lr(19), s.lr(10));
}

#[test]
fn downstream_schedule_closed_form() {
    let s = DownstreamSchedule::default();
    let exact = [(0, 1e-4), (10, 1e-4), (40, 1e-5), (99, 1e-6)];
    for (e, v) in exact {
        assert!(within_ulp(s.lr(e), v), "epoch {e}: {} vs {v}", s.lr(e));
    }
    assert_eq!(s.lr(39), s.lr(0));
    assert_eq!(s.lr(79), s.lr(40));
    assert_eq!(s.epochs, 100);
}

#[test]
fn schedules_validate() {
    assert!(PretrainSchedule { lr0: 0.0, ..Default::default() }.validate().is_err());
    assert!(DownstreamSchedule { decay_every: 0, ..Default::default() }.validate().is_err());
    assert!(DownstreamSchedule { decay: 1.5, ..Default::default() }.validate().is_err());
}

fn tiny_model() -> PretextModelConfig {
    PretextModelConfig {
        audio: AudioEncoderConfig { n_mels: 80, hidden: 6, layers: 1, feature_dim: 5 },
        identity: IdentityEncoderConfig { channels: vec![2, 2, 2, 2, 2, 2], embed_dim: 3, height: 64, width: 128 },
        noise: NoiseConfig { dim: 2, variance: 0.33 },
        scorer_hidden: 4,
        video_stride: 4,
    }
}

fn pretrain_cfg(task: PretextTask, alpha: f64) -> PretrainConfig {
    let sched = PretrainSchedule { lr0: 1e-3, epochs: 3, batch_size: 4, ..Default::default() };
    PretrainConfig { alpha, ..PretrainConfig::new(task, tiny_model(), sched, 5) }
}

#[test]
fn reconstruction_endpoint_of_combined_task_is_bitwise_l1() {
    let d = generate_synthetic(&SyntheticSpec { n_speakers: 3, clips_per_class: 2, clip_seconds: 0.3, seed: 2, ..Default::default() })
        .unwrap();
    let mels: Vec<Tensor> = d.clips.iter().map(|c| compute_log_mel(&c.waveform).unwrap().into_tensor()).collect();
    let items: Vec<PretrainItem> = d
        .clips
        .iter()
        .zip(&mels)
        .map(|(c, m)| PretrainItem { mel: m, video: Some(c as &dyn VideoSource) })
        .collect();
    let l1 = pretrain(&items, &pretrain_cfg(PretextTask::L1, 0.67), &mut |_| {}).unwrap();
    let both = pretrain(&items, &pretrain_cfg(PretextTask::L1Odd, 1.0), &mut |_| {}).unwrap();
    let a: Vec<u64> = l1.history.iter().map(|h| h.total.to_bits()).collect();
    let b: Vec<u64> = both.history.iter().map(|h| h.total.to_bits()).collect();
    assert_eq!(a, b);
    assert_eq!(l1.store.digest(AUDIO_ENCODER), both.store.digest(AUDIO_ENCODER));
    assert!(both.history.iter().all(|h| h.odd.is_some()));

    let again = pretrain(&items, &pretrain_cfg(PretextTask::L1, 0.67), &mut |_| {}).unwrap();
    assert_eq!(again.store.digest(""), l1.store.digest(""));

    let audio_only: Vec<PretrainItem> = mels.iter().map(|m| PretrainItem { mel: m, video: None }).collect();
    assert!(matches!(pretrain(&audio_only, &pretrain_cfg(PretextTask::L1, 0.5), &mut |_| {}), Err(Error::MissingModality(_))));
    assert!(pretrain(&audio_only, &pretrain_cfg(PretextTask::Odd, 0.5), &mut |_| {}).is_ok());
}

fn toy_split(n: usize, seed: u64, d: usize) -> Vec<Example> {
    let mut r = rng::from_seed(seed);
    (0..n)
        .map(|i| {
            let c = i % 3;
            let t = 6 + i % 3;
            let data = (0..t * d).map(|j| r.random_range(-1.0..1.0) + if j % d == c { 1.5 } else { 0.0 }).collect();
            Example { input: Tensor::from_vec(&[t, d], data).unwrap(), label: Some(c), target: None }
        })
        .collect()
}

fn toy_data(d: usize) -> DownstreamData {
    DownstreamData { train: toy_split(24, 1, d), val: toy_split(9, 2, d), test: toy_split(9, 3, d) }
}

fn head_cfg(seed: u64) -> DownstreamConfig {
    DownstreamConfig {
        bgru: BgruConfig { hidden: 4, layers: 1 },
        schedule: DownstreamSchedule { lr0: 1e-2, epochs: 6, batch_size: 8, ..Default::default() },
        seed,
    }
}

const CLASSIFY: DownstreamTask = DownstreamTask::Classify { classes: 3 };

#[test]
fn best_validation_epoch_is_selected() {
    let out = train_downstream(CLASSIFY, &toy_data(4), Mode::Frozen, Frontend::Features, &head_cfg(1)).unwrap();
    assert_eq!(out.val_trace.len(), 6);
    let best = out.val_trace.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(out.best_val, best);
    assert_eq!(out.best_epoch, out.val_trace.iter().position(|&v| v == best).unwrap());
    assert!((0.0..=1.0).contains(&out.test_metric));

    let again = train_downstream(CLASSIFY, &toy_data(4), Mode::Frozen, Frontend::Features, &head_cfg(1)).unwrap();
    assert_eq!(out.val_trace, again.val_trace);
    assert_eq!(out.test_metric.to_bits(), again.test_metric.to_bits());
    assert_eq!(out.evaluate(&toy_data(4).test).unwrap(), (out.test_metric, out.test_accuracy));
}

fn encoder_store(cfg: &AudioEncoderConfig) -> ParamStore {
    let mut s = ParamStore::new();
    AudioEncoder::new(&mut s, cfg, &mut rng::from_seed(9));
    s
}

#[test]
fn mode_contracts() {
    let ecfg = AudioEncoderConfig { n_mels: 80, hidden: 4, layers: 1, feature_dim: 4 };
    let src = encoder_store(&ecfg);
    let data = toy_data(80);
    let frozen = train_downstream(CLASSIFY, &data, Mode::Frozen, Frontend::Encoder { cfg: &ecfg, init: Some(&src) }, &head_cfg(2)).unwrap();
    let (before, after) = frozen.encoder_digest.clone().unwrap();
    assert_eq!(before, after);
    assert_eq!(before, src.digest(AUDIO_ENCODER));
    assert_eq!(frozen.evaluate(&data.test).unwrap().0, frozen.test_metric);

    let tuned = train_downstream(CLASSIFY, &data, Mode::Finetune, Frontend::Encoder { cfg: &ecfg, init: Some(&src) }, &head_cfg(2)).unwrap();
    let (before, after) = tuned.encoder_digest.clone().unwrap();
    assert_eq!(before, src.digest(AUDIO_ENCODER));
    assert_ne!(before, after);
    assert_eq!(after, tuned.store.digest(AUDIO_ENCODER));
    assert_eq!(tuned.evaluate(&data.test).unwrap().0, tuned.test_metric);

    let scratch = train_downstream(CLASSIFY, &data, Mode::Scratch, Frontend::Encoder { cfg: &ecfg, init: None }, &head_cfg(2)).unwrap();
    assert_ne!(scratch.store.digest(AUDIO_ENCODER), src.digest(AUDIO_ENCODER));

    let violations = [
        (Mode::Scratch, Frontend::Encoder { cfg: &ecfg, init: Some(&src) }),
        (Mode::Scratch, Frontend::Features),
        (Mode::Finetune, Frontend::Features),
        (Mode::Finetune, Frontend::Encoder { cfg: &ecfg, init: None }),
        (Mode::Frozen, Frontend::Encoder { cfg: &ecfg, init: None }),
    ];
    for (mode, fe) in violations {
        assert!(matches!(train_downstream(CLASSIFY, &data, mode, fe, &head_cfg(2)), Err(Error::ModeViolation(_))), "{mode:?}");
    }
}

#[test]
fn missing_labels_are_rejected() {
    let mut data = toy_data(4);
    for e in &mut data.train {
        e.label = None;
    }
    assert!(matches!(train_downstream(CLASSIFY, &data, Mode::Frozen, Frontend::Features, &head_cfg(0)), Err(Error::MissingLabels(_))));
    let mut data = toy_data(4);
    data.test[0].label = None;
    assert!(matches!(train_downstream(CLASSIFY, &data, Mode::Frozen, Frontend::Features, &head_cfg(0)), Err(Error::MissingLabels(_))));
}

#[test]
fn partially_labelled_training_split_uses_labelled_clips() {
    let mut data = toy_data(4);
    for e in data.train.iter_mut().skip(6) {
        e.label = None;
    }
    assert!(train_downstream(CLASSIFY, &data, Mode::Frozen, Frontend::Features, &head_cfg(0)).is_ok());
}

#[test]
fn regression_selects_by_concordance() {
    let mut r = rng::from_seed(4);
    let mut split = |n: usize| -> Vec<Example> {
        (0..n)
            .map(|_| {
                let t = 10;
                let x: Vec<f64> = (0..t * 2).map(|_| r.random_range(-1.0..1.0)).collect();
                let y: Vec<f64> = (0..t).map(|i| 0.5 * x[2 * i]).collect();
                Example { input: Tensor::from_vec(&[t, 2], x).unwrap(), label: None, target: Some(y) }
            })
            .collect()
    };
    let data = DownstreamData { train: split(16), val: split(6), test: split(6) };
    let out = train_downstream(DownstreamTask::Regress, &data, Mode::Frozen, Frontend::Features, &head_cfg(3)).unwrap();
    assert_eq!(out.best_val, out.val_trace.iter().cloned().fold(f64::MIN, f64::max));
    assert!((-1.0..=1.0).contains(&out.test_metric));
    assert!(out.test_accuracy.is_none());
}

#[test]
fn repeated_runs_are_reproducible() {
    let run = |seed: u64| -> vssl_core::Result<f64> {
        Ok(train_downstream(CLASSIFY, &toy_data(4), Mode::Frozen, Frontend::Features, &head_cfg(seed))?.test_metric)
    };
    let a = run_repeated("macro_f1", 3, 11, run).unwrap();
    let b = run_repeated("macro_f1", 3, 11, run).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seeds, (0..3).map(|i| rng::derive(11, i)).collect::<Vec<_>>());
    let one = run_repeated("macro_f1", 1, 11, run).unwrap();
    assert_eq!(one.std, 0.0);
    assert!(run_repeated("x", 0, 0, run).is_err());
}
