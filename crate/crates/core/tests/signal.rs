use proptest::prelude::*;
use rand::Rng as _;
use vssl_core::rng;
use vssl_core::signal::*;
use vssl_core::tensor::Tensor;
use vssl_core::Error;

fn sliding_frames(len: usize, win: usize, hop: usize) -> usize {
    let mut n = 0;
    let mut start = 0;
    while start + win <= len {
        n += 1;
        start += hop;
    }
    n
}

fn noise_wave(len: usize, seed: u64, amp: f64) -> Waveform {
    let mut r = rng::from_seed(seed);
    Waveform::new((0..len).map(|_| r.random_range(-amp..amp)).collect(), SAMPLE_RATE).unwrap()
}

fn tone(len: usize, hz: f64, amp: f64) -> Waveform {
    let s = (0..len)
        .map(|i| amp * (2.0 * std::f64::consts::PI * hz * i as f64 / SAMPLE_RATE as f64).sin())
        .collect();
    Waveform::new(s, SAMPLE_RATE).unwrap()
}

#[test]
fn framing_count_matches_sliding_oracle() {
    let mut r = rng::from_seed(5);
    let fe = MelFrontend::default();
    for _ in 0..200 {
        let len = r.random_range(400..6000);
        let w = noise_wave(len, len as u64, 0.5);
        let lm = compute_log_mel(&w).unwrap();
        assert_eq!(lm.num_frames(), sliding_frames(len, 400, 160), "len {len}");
        assert_eq!(fe.frame_count(len).unwrap(), lm.num_frames());
    }
}

#[test]
fn one_second_gives_98_by_80() {
    let w = tone(16000, 440.0, 0.5);
    assert_eq!(compute_log_mel(&w).unwrap().frames().shape(), &[98, 80]);
    assert_eq!(compute_mfcc(&w).unwrap().frames().shape(), &[98, 39]);
    assert_eq!(compute_log_mel(&tone(400, 440.0, 0.5)).unwrap().num_frames(), 1);
}

#[test]
fn too_short_input_is_rejected() {
    let w = noise_wave(399, 1, 0.1);
    assert_eq!(compute_log_mel(&w), Err(Error::InputTooShort { got: 399, need: 400 }));
    assert!(matches!(compute_mfcc(&w), Err(Error::InputTooShort { .. })));
}

#[test]
fn silence_sits_on_the_log_floor() {
    let w = Waveform::new(vec![0.0; 4000], SAMPLE_RATE).unwrap();
    let lm = compute_log_mel(&w).unwrap();
    assert!(lm.frames().data().iter().all(|&v| v == (1e-10f64).ln()));
}

#[test]
fn frontend_is_pure() {
    let w = noise_wave(5000, 9, 0.3);
    assert_eq!(compute_log_mel(&w).unwrap(), compute_log_mel(&w).unwrap());
    assert_eq!(compute_mfcc(&w).unwrap(), compute_mfcc(&w).unwrap());
}

#[test]
fn steady_tone_has_flat_deltas() {
    // 1 kHz repeats exactly every hop of 160 samples
    let m = compute_mfcc(&tone(16000, 1000.0, 0.6)).unwrap();
    let f = m.frames();
    for t in 2..f.dim(0) - 2 {
        for c in 13..39 {
            assert!(f.row(t)[c].abs() < 1e-6, "frame {t} col {c}: {}", f.row(t)[c]);
        }
    }
}

fn direct_delta(x: &[Vec<f64>], t: usize, c: usize) -> f64 {
    let last = x.len() as isize - 1;
    let at = |i: isize| x[i.clamp(0, last) as usize][c];
    let ti = t as isize;
    (at(ti + 1) - at(ti - 1) + 2.0 * (at(ti + 2) - at(ti - 2))) / 10.0
}

#[test]
fn mfcc_delta_columns_follow_regression_formula() {
    let m = compute_mfcc(&noise_wave(4000, 3, 0.4)).unwrap();
    let f = m.frames();
    let t = f.dim(0);
    let base: Vec<Vec<f64>> = (0..t).map(|i| f.row(i)[..13].to_vec()).collect();
    let d1: Vec<Vec<f64>> = (0..t).map(|i| (0..13).map(|c| direct_delta(&base, i, c)).collect()).collect();
    let d2: Vec<Vec<f64>> = (0..t).map(|i| (0..13).map(|c| direct_delta(&d1, i, c)).collect()).collect();
    for i in 0..t {
        for c in 0..13 {
            assert!((f.row(i)[13 + c] - d1[i][c]).abs() < 1e-9);
            assert!((f.row(i)[26 + c] - d2[i][c]).abs() < 1e-9);
        }
    }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[test]
fn mixing_hits_requested_snr() {
    let clean = tone(8000, 300.0, 0.5);
    let noise = noise_wave(12000, 4, 0.8);
    for snr in [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0] {
        let (mix, scaled) = mix_at_snr_components(&clean, &noise, snr).unwrap();
        let added: Vec<f64> = mix.samples().iter().zip(clean.samples()).map(|(m, c)| m - c).collect();
        let measured = 10.0 * (power(clean.samples()) / power(&added)).log10();
        assert!((measured - snr).abs() < 0.1, "{snr} -> {measured}");
        let exact = 10.0 * (power(clean.samples()) / power(&scaled)).log10();
        assert!((exact - snr).abs() < 1e-9);
    }
    let (_, s0) = mix_at_snr_components(&clean, &noise, 0.0).unwrap();
    assert!((power(&s0) / power(clean.samples()) - 1.0).abs() < 1e-9);
    let (_, s20) = mix_at_snr_components(&clean, &noise, 20.0).unwrap();
    assert!((power(clean.samples()) / power(&s20) / 100.0 - 1.0).abs() < 1e-6);
    let (_, s5) = mix_at_snr_components(&clean, &noise, -5.0).unwrap();
    assert!((power(&s5) / power(clean.samples()) - 10f64.powf(0.5)).abs() < 1e-9);
}

#[test]
fn short_noise_is_tiled_and_silence_rejected() {
    let clean = tone(3000, 300.0, 0.5);
    let noise = noise_wave(700, 8, 0.5);
    let (mix, scaled) = mix_at_snr_components(&clean, &noise, 5.0).unwrap();
    assert_eq!(mix.len(), 3000);
    assert!((scaled[0] / scaled[700] - 1.0).abs() < 1e-12);
    let zero = Waveform::new(vec![0.0; 3000], SAMPLE_RATE).unwrap();
    assert_eq!(mix_at_snr(&zero, &noise, 0.0), Err(Error::ZeroPowerSignal));
    assert_eq!(mix_at_snr(&clean, &zero, 0.0), Err(Error::ZeroPowerSignal));
}

#[test]
fn babble_contract() {
    let pool: Vec<Waveform> = (0..10).map(|i| noise_wave(3000 + 100 * i, i as u64, 0.3)).collect();
    let a = synth_babble(&pool, 6, 2500, 42).unwrap();
    assert_eq!(a, synth_babble(&pool, 6, 2500, 42).unwrap());
    assert_eq!(a.len(), 2500);
    let peak = a.samples().iter().fold(0.0f64, |p, v| p.max(v.abs()));
    assert_eq!(peak, 1.0);

    let single = synth_babble(&pool[..1], 1, 1000, 3).unwrap();
    let src = pool[0].samples();
    let src_peak_at = |off: usize| src[off..off + 1000].iter().fold(0.0f64, |p, v| p.max(v.abs()));
    let found = (0..=src.len() - 1000).any(|off| {
        let p = src_peak_at(off);
        single.samples().iter().zip(&src[off..off + 1000]).all(|(s, x)| (s - x / p).abs() < 1e-12)
    });
    assert!(found, "single-talker babble is not a scaled crop of its source");

    assert_eq!(synth_babble(&[], 1, 100, 0), Err(Error::EmptyPool));
    assert_eq!(synth_babble(&pool[..2], 3, 100, 0), Err(Error::EmptyPool));
}

fn mel_of(t: usize, seed: u64) -> LogMelSpectrogram {
    let mut r = rng::from_seed(seed);
    LogMelSpectrogram::new(Tensor::from_vec(&[t, 80], (0..t * 80).map(|_| r.random_range(-5.0..5.0)).collect()).unwrap())
        .unwrap()
}

#[test]
fn jumble_swaps_exactly_the_two_windows() {
    let x = mel_of(100, 1);
    let spec = JumbleSpec { window_fraction: 0.15, start_a: 10, start_b: 60, window_len: 15 };
    let y = jumble_with(&x, &spec).unwrap();
    for t in 0..100 {
        let src = match t {
            10..=24 => t + 50,
            60..=74 => t - 50,
            _ => t,
        };
        assert_eq!(y.frames().row(t), x.frames().row(src));
    }
}

#[test]
fn jumble_rejects_short_or_overlapping() {
    assert!(matches!(jumble(&mel_of(1, 0), 0.15, &mut rng::from_seed(0)), Err(Error::TooShortToJumble { .. })));
    let bad = JumbleSpec { window_fraction: 0.15, start_a: 0, start_b: 5, window_len: 10 };
    assert!(matches!(jumble_with(&mel_of(40, 0), &bad), Err(Error::TooShortToJumble { .. })));
}

fn sorted_rows(x: &Tensor) -> Vec<Vec<u64>> {
    let mut rows: Vec<Vec<u64>> = (0..x.dim(0)).map(|i| x.row(i).iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort();
    rows
}

proptest! {
    #[test]
    fn jumble_is_an_involution_preserving_rows(t in 2usize..300, seed in any::<u64>()) {
        let x = mel_of(t, seed);
        let (y, spec) = jumble(&x, DEFAULT_JUMBLE_FRACTION, &mut rng::from_seed(seed)).unwrap();
        prop_assert_eq!(spec.window_len, ((0.15 * t as f64).round() as usize).max(1));
        prop_assert!(spec.start_a + spec.window_len <= spec.start_b);
        prop_assert!(spec.start_b + spec.window_len <= t);
        prop_assert_eq!(jumble_with(&y, &spec).unwrap(), x.clone());
        prop_assert_eq!(sorted_rows(y.frames()), sorted_rows(x.frames()));
        for i in (0..t).filter(|&i| i < spec.start_a || (i >= spec.start_a + spec.window_len && i < spec.start_b) || i >= spec.start_b + spec.window_len) {
            prop_assert_eq!(y.frames().row(i), x.frames().row(i));
        }
    }

    #[test]
    fn frame_count_formula(len in 400usize..200_000) {
        let fe = MelFrontend::default();
        prop_assert_eq!(fe.frame_count(len).unwrap(), sliding_frames(len, 400, 160));
    }
}
