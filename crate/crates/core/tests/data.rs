use std::collections::BTreeSet;

use proptest::prelude::*;
use vssl_core::data::*;

fn records(n_speakers: usize, per_speaker: usize) -> Vec<ClipRecord> {
    (0..n_speakers)
        .flat_map(|s| {
            (0..per_speaker).map(move |k| ClipRecord {
                clip_id: format!("s{s}_{k}"),
                speaker_id: format!("spk{s}"),
                audio_path: format!("a/{s}_{k}.wav"),
                video_path: None,
                label: Some(k % 3),
                affect_track: None,
                split: Split::Train,
            })
        })
        .collect()
}

fn speakers_in(rs: &[ClipRecord], s: Split) -> BTreeSet<String> {
    rs.iter().filter(|r| r.split == s).map(|r| r.speaker_id.clone()).collect()
}

#[test]
fn speaker_split_counts_and_disjointness() {
    let out = split_speakers(&records(10, 3), [0.8, 0.1, 0.1], 4).unwrap();
    let (tr, va, te) = (speakers_in(&out, Split::Train), speakers_in(&out, Split::Val), speakers_in(&out, Split::Test));
    assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    check_speaker_disjoint(&out).unwrap();
    assert_eq!(out, split_speakers(&records(10, 3), [0.8, 0.1, 0.1], 4).unwrap());
    assert!(matches!(split_speakers(&records(2, 3), [0.8, 0.1, 0.1], 4), Err(vssl_core::Error::Split(_))));
}

#[test]
fn disjointness_check_catches_leaks() {
    let mut rs = records(3, 2);
    rs[1].split = Split::Test;
    assert!(check_speaker_disjoint(&rs).is_err());
}

#[test]
fn subset_fraction_documented_counts() {
    let rs = records(100, 1);
    assert_eq!(subset_fraction(&rs, 1.0, SubsetKind::PretrainClips, 0).unwrap(), rs);
    assert_eq!(subset_fraction(&rs, 0.2, SubsetKind::PretrainClips, 0).unwrap().len(), 20);

    let big = records(1000, 1);
    let labeled = subset_fraction(&big, 0.1, SubsetKind::Labels, 0).unwrap();
    assert_eq!(labeled.len(), 1000);
    assert_eq!(labeled.iter().filter(|r| r.is_labeled()).count(), 100);

    assert_eq!(subset_fraction(&records(3, 1), 0.1, SubsetKind::PretrainClips, 0), Err(vssl_core::Error::EmptySubset(0.1)));
    assert!(subset_fraction(&rs, 0.0, SubsetKind::Labels, 0).is_err());
    assert!(subset_fraction(&rs, 1.5, SubsetKind::Labels, 0).is_err());
}

#[test]
fn subset_keeps_held_out_splits() {
    let rs = split_speakers(&records(10, 4), [0.6, 0.2, 0.2], 1).unwrap();
    let sub = subset_fraction(&rs, 0.25, SubsetKind::PretrainClips, 3).unwrap();
    for s in [Split::Val, Split::Test] {
        let a: Vec<_> = rs.iter().filter(|r| r.split == s).collect();
        let b: Vec<_> = sub.iter().filter(|r| r.split == s).collect();
        assert_eq!(a, b);
    }
}

proptest! {
    #[test]
    fn subsets_are_nested(n in 5usize..200, seed in any::<u64>(), f1 in 0.05f64..1.0, f2 in 0.05f64..1.0) {
        let (lo, hi) = if f1 < f2 { (f1, f2) } else { (f2, f1) };
        let rs = records(n, 1);
        let ids = |f: f64| -> Option<BTreeSet<String>> {
            subset_fraction(&rs, f, SubsetKind::PretrainClips, seed).ok().map(|v| v.into_iter().map(|r| r.clip_id).collect())
        };
        if let (Some(a), Some(b)) = (ids(lo), ids(hi)) {
            prop_assert!(a.is_subset(&b));
            prop_assert_eq!(b.len(), (hi * n as f64).round() as usize);
        }
    }

    #[test]
    fn splits_never_share_speakers(n in 3usize..40, seed in any::<u64>()) {
        let out = split_speakers(&records(n, 2), [0.6, 0.2, 0.2], seed).unwrap();
        prop_assert!(check_speaker_disjoint(&out).is_ok());
        for s in Split::ALL {
            prop_assert!(!speakers_in(&out, s).is_empty());
        }
    }
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { n_speakers: 12, n_classes: 4, clips_per_class: 2, seed, ..Default::default() }
}

#[test]
fn synthetic_corpus_is_deterministic() {
    let a = generate_synthetic(&small_spec(7)).unwrap();
    let b = generate_synthetic(&small_spec(7)).unwrap();
    assert_eq!(a.records(), b.records());
    for (x, y) in a.clips.iter().zip(&b.clips) {
        assert_eq!(x.waveform, y.waveform);
        assert_eq!(x.frame(3), y.frame(3));
    }
    let c = generate_synthetic(&small_spec(8)).unwrap();
    assert_ne!(a.clips[0].waveform, c.clips[0].waveform);
    check_speaker_disjoint(&a.records()).unwrap();
    assert_eq!(a.clips.len(), 12 * 4 * 2);
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn mouth_opening_tracks_envelope() {
    let d = generate_synthetic(&small_spec(3)).unwrap();
    for clip in d.clips.iter().step_by(7) {
        let tv = clip.num_video_frames();
        // red channel of the mouth is far above anything the background reaches
        let opening: Vec<f64> = (0..tv)
            .map(|j| {
                let f = clip.frame(j);
                (0..FRAME_HEIGHT).filter(|&y| f.data()[y * FRAME_WIDTH + 64] > 0.6).count() as f64
            })
            .collect();
        let env: Vec<f64> = (0..tv).map(|j| clip.envelope_at_video_frame(j)).collect();
        let heights: Vec<f64> = (0..tv).map(|j| clip.mouth_height(j)).collect();
        assert!(pearson(&heights, &env) > 0.99);
        assert!(pearson(&opening, &env) > 0.99, "{}", clip.record.clip_id);
    }
}

fn nearest_centroid_accuracy(features: &[(usize, f64)], classes: usize) -> f64 {
    let centroids: Vec<f64> = (0..classes)
        .map(|c| {
            let v: Vec<f64> = features.iter().filter(|f| f.0 == c).map(|f| f.1).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    let hits = features
        .iter()
        .filter(|(c, x)| {
            let best = (0..classes).min_by(|&a, &b| (x - centroids[a]).abs().total_cmp(&(x - centroids[b]).abs())).unwrap();
            best == *c
        })
        .count();
    hits as f64 / features.len() as f64
}

#[test]
fn class_is_recoverable_from_envelope_statistics() {
    let d = generate_synthetic(&small_spec(5)).unwrap();
    let from_track: Vec<(usize, f64)> = d
        .clips
        .iter()
        .map(|c| {
            let a = c.record.affect_track.as_ref().unwrap();
            (c.class, a.iter().sum::<f64>() / a.len() as f64)
        })
        .collect();
    assert!(nearest_centroid_accuracy(&from_track, 4) >= 0.99);

    // frame-wise RMS of the waveform, normalised by its peak
    let from_audio: Vec<(usize, f64)> = d
        .clips
        .iter()
        .map(|c| {
            let rms: Vec<f64> = c
                .waveform
                .samples()
                .chunks(160)
                .map(|ch| (ch.iter().map(|v| v * v).sum::<f64>() / ch.len() as f64).sqrt())
                .collect();
            let peak = rms.iter().cloned().fold(0.0, f64::max);
            (c.class, rms.iter().map(|v| v / peak).sum::<f64>() / rms.len() as f64)
        })
        .collect();
    assert!(nearest_centroid_accuracy(&from_audio, 4) >= 0.99);
}

#[test]
fn expression_corner_matches_its_class_template() {
    let d = generate_synthetic(&small_spec(6)).unwrap();
    for clip in d.clips.iter().step_by(3) {
        for j in [0, clip.num_video_frames() - 1] {
            let f = clip.frame(j);
            let sse = |c: usize| -> f64 {
                let mut s = 0.0;
                for ch in 0..3 {
                    for y in 0..16 {
                        for x in 0..32 {
                            let v = f.data()[(ch * FRAME_HEIGHT + y) * FRAME_WIDTH + x];
                            s += (v - expression_template(c, 4, y, x)).powi(2);
                        }
                    }
                }
                s
            };
            let best = (0..4).min_by(|&a, &b| sse(a).total_cmp(&sse(b))).unwrap();
            assert_eq!(best, clip.class);
        }
    }
}

#[test]
fn synthetic_spec_validation() {
    assert!(SyntheticSpec { n_classes: 1, ..Default::default() }.validate().is_err());
    assert!(SyntheticSpec { n_speakers: 2, ..Default::default() }.validate().is_err());
    assert!(SyntheticSpec { clips_per_class: 0, ..Default::default() }.validate().is_err());
    assert!(SyntheticSpec::default().validate().is_ok());
}

