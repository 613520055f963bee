use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;
use vssl_core::metrics::*;
use vssl_core::rng;
use vssl_core::Error;

/// Concordance straight from its moment definition, with biased moments.
fn ccc_oracle(y: &[f64], p: &[f64]) -> f64 {
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mp = p.iter().sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let vp = p.iter().map(|v| (v - mp).powi(2)).sum::<f64>() / n;
    let cov = y.iter().zip(p).map(|(a, b)| (a - my) * (b - mp)).sum::<f64>() / n;
    let d = vy + vp + (my - mp).powi(2);
    if d < 1e-12 {
        0.0
    } else {
        2.0 * cov / d
    }
}

fn random_vec(r: &mut vssl_core::rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-3.0..3.0)).collect()
}

#[test]
fn ccc_matches_oracle_on_random_pairs() {
    let mut r = rng::from_seed(11);
    for _ in 0..1000 {
        let n = r.random_range(2..=64);
        let y = random_vec(&mut r, n);
        let shift = r.random_range(-1.0..1.0);
        let p: Vec<f64> = y.iter().map(|v| 0.5 * v + shift + r.random_range(-1.0..1.0)).collect();
        let c = ccc(&y, &p).unwrap().ccc;
        assert!((c - ccc_oracle(&y, &p)).abs() <= 1e-9);
        assert!(c.abs() <= 1.0);
    }
}

#[test]
fn ccc_documented_values() {
    assert_eq!(ccc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().ccc, 1.0);
    assert_eq!(ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().ccc, -1.0);
    assert!((ccc(&[0.0, 1.0], &[1.0, 2.0]).unwrap().ccc - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(ccc(&[2.0, 2.0], &[2.0, 2.0]).unwrap().ccc, 0.0);
}

#[test]
fn ccc_errors() {
    assert!(matches!(ccc(&[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
    assert!(matches!(ccc(&[1.0], &[1.0]), Err(Error::TooShort { .. })));
}

#[test]
fn ccc_loss_endpoints() {
    let y = [0.3, -1.0, 2.0, 0.5];
    assert_eq!(ccc_loss(&y, &y).unwrap(), 0.0);
    let neg: Vec<f64> = y.iter().map(|v| 2.0 * 0.45 - v).collect();
    assert!((ccc_loss(&y, &neg).unwrap() - 1.0).abs() < 1e-12);
    // orthogonal, equal means
    assert!((ccc_loss(&[1.0, -1.0, 1.0, -1.0], &[1.0, 1.0, -1.0, -1.0]).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn independent_long_sequences_are_not_concordant() {
    let mut r = rng::from_seed(12);
    let y = random_vec(&mut r, 10_000);
    let mut p = y.clone();
    p.shuffle(&mut r);
    assert!(ccc(&y, &p).unwrap().ccc.abs() < 0.05);
}

#[test]
fn ccc_bounded_over_many_pairs() {
    let mut r = rng::from_seed(13);
    for _ in 0..10_000 {
        let n = r.random_range(2..20);
        let (y, p) = (random_vec(&mut r, n), random_vec(&mut r, n));
        assert!(ccc(&y, &p).unwrap().ccc.abs() <= 1.0);
    }
}

#[test]
fn f1_documented_values() {
    assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
    assert!((macro_f1(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap() - 0.5).abs() < 1e-15);
    assert!((macro_f1(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(matches!(macro_f1(&[0, 3], &[0, 1], 3), Err(Error::Label(_))));
    assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 0]).unwrap(), 2.0 / 3.0);
}

fn t_density(x: f64, nu: f64) -> f64 {
    (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0)
}

/// Two-sided tail probability by Simpson integration of the unnormalized
/// density, mapped onto `[0, 1)` with `x = u / (1 - u)`.
fn t_two_sided_oracle(t: f64, nu: f64) -> f64 {
    let integrate = |a: f64, b: f64| {
        let n = 200_000;
        let h = (b - a) / n as f64;
        let f = |u: f64| {
            if u >= 1.0 {
                0.0
            } else {
                let x = u / (1.0 - u);
                t_density(x, nu) / ((1.0 - u) * (1.0 - u))
            }
        };
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let ut = t.abs() / (1.0 + t.abs());
    integrate(ut, 1.0) / integrate(0.0, 1.0)
}

#[test]
fn t_test_p_matches_quadrature() {
    let mut r = rng::from_seed(14);
    for _ in 0..20 {
        let a = random_vec(&mut r, 10);
        let b: Vec<f64> = a.iter().map(|v| v + r.random_range(-0.5..0.8)).collect();
        let tt = paired_t_test(&a, &b).unwrap();
        assert_eq!(tt.dof, 9.0);
        let oracle = t_two_sided_oracle(tt.t, 9.0);
        assert!((tt.p - oracle).abs() < 1e-6, "t {} p {} oracle {oracle}", tt.t, tt.p);
    }
}

#[test]
fn t_test_edge_cases() {
    let b = [0.1, 0.5, 0.3, 0.9];
    let a: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
    assert_eq!(paired_t_test(&a, &b), Err(Error::DegenerateTest));
    let tt = paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
    assert_eq!(tt.t, 0.0);
    assert_eq!(tt.p, 1.0);
}

#[test]
fn run_report_statistics() {
    let r = RunReport::new("f1", vec![0.5; 10], (0..10).collect());
    assert_eq!((r.mean, r.std), (0.5, 0.0));
    let one = RunReport::new("f1", vec![0.7], vec![3]);
    assert_eq!(one.std, 0.0);
    let r = RunReport::new("f1", vec![1.0, 3.0], vec![0, 1]);
    assert_eq!((r.mean, r.std), (2.0, 1.0));
}

proptest! {
    #[test]
    fn ccc_symmetric_and_affine_invariant(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..64),
        a in 0.1f64..10.0,
        b in -10.0f64..10.0,
    ) {
        let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let c = ccc(&y, &p).unwrap().ccc;
        prop_assert!((c - ccc(&p, &y).unwrap().ccc).abs() <= 1e-12);
        let ya: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let pa: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        prop_assert!((ccc(&ya, &pa).unwrap().ccc - c).abs() <= 1e-9);
    }

    #[test]
    fn f1_invariant_under_relabeling(
        labels in prop::collection::vec((0usize..5, 0usize..5), 1..80),
        seed in any::<u64>(),
    ) {
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng::from_seed(seed));
        let (p, t): (Vec<usize>, Vec<usize>) = labels.into_iter().unzip();
        let pp: Vec<usize> = p.iter().map(|&i| perm[i]).collect();
        let tp: Vec<usize> = t.iter().map(|&i| perm[i]).collect();
        let f = macro_f1(&p, &t, 5).unwrap();
        prop_assert!((f - macro_f1(&pp, &tp, 5).unwrap()).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&f));
    }
}
