//! Evaluation metrics: concordance correlation, macro-F1, accuracy and the
//! paired t-test used to compare repeated runs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{mean, population_std, student_t_cdf};

/// Denominator below which CCC is reported as 0.
pub const CCC_EPS: f64 = 1e-12;

/// Concordance correlation coefficient and the moments it was built from.
/// Moments are population (1/n) moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CccResult {
    pub ccc: f64,
    pub mu_y: f64,
    pub mu_yhat: f64,
    pub var_y: f64,
    pub var_yhat: f64,
    pub cov: f64,
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Shape(alloc::format!("ccc: lengths {} and {}", y.len(), yhat.len())));
    }
    if y.len() < 2 {
        return Err(Error::TooShort { need: 2, got: y.len() });
    }
    Ok(())
}

pub fn ccc(y: &[f64], yhat: &[f64]) -> Result<CccResult> {
    check_pair(y, yhat)?;
    let n = y.len() as f64;
    let mu_y = y.iter().sum::<f64>() / n;
    let mu_yhat = yhat.iter().sum::<f64>() / n;
    let (mut vy, mut vh, mut cv) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        let (da, db) = (a - mu_y, b - mu_yhat);
        vy += da * da;
        vh += db * db;
        cv += da * db;
    }
    let (var_y, var_yhat, cov) = (vy / n, vh / n, cv / n);
    let denom = var_y + var_yhat + (mu_y - mu_yhat) * (mu_y - mu_yhat);
    let c = if denom < CCC_EPS { 0.0 } else { (2.0 * cov / denom).clamp(-1.0, 1.0) };
    Ok(CccResult { ccc: c, mu_y, mu_yhat, var_y, var_yhat, cov })
}

/// `1 - (ccc + 1) / 2`, in `[0, 1]`.
pub fn ccc_loss(y: &[f64], yhat: &[f64]) -> Result<f64> {
    Ok(1.0 - (ccc(y, yhat)?.ccc + 1.0) / 2.0)
}

/// Gradient of CCC with respect to each prediction `yhat[i]`.
pub fn ccc_grad_wrt_pred(y: &[f64], yhat: &[f64]) -> Result<Vec<f64>> {
    let r = ccc(y, yhat)?;
    let n = y.len() as f64;
    let d = r.var_y + r.var_yhat + (r.mu_y - r.mu_yhat) * (r.mu_y - r.mu_yhat);
    if d < CCC_EPS {
        return Ok(vec![0.0; y.len()]);
    }
    let dm = r.mu_y - r.mu_yhat;
    Ok(y.iter()
        .zip(yhat)
        .map(|(a, b)| {
            let dcov = (a - r.mu_y) / n;
            let dden = 2.0 * (b - r.mu_yhat) / n - 2.0 * dm / n;
            2.0 * dcov / d - 2.0 * r.cov * dden / (d * d)
        })
        .collect())
}

fn check_labels(pred: &[usize], truth: &[usize], classes: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(alloc::format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l >= classes) {
        return Err(Error::Label(alloc::format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Unweighted mean of per-class F1 over all `classes`. A class that is absent
/// from both predictions and labels contributes 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    check_labels(pred, truth, classes)?;
    if classes == 0 {
        return Err(Error::Label("zero classes".into()));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let f1: f64 = (0..classes)
        .map(|c| {
            let den = 2 * tp[c] + fp[c] + fneg[c];
            if den == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / den as f64
            }
        })
        .sum();
    Ok(f1 / classes as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(alloc::format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: f64,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(alloc::format!("paired test on {} and {} values", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::TooShort { need: 2, got: n });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let var = d.iter().map(|v| (v - md) * (v - md)).sum::<f64>() / (n - 1) as f64;
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // rounding noise of a constant shift is not a real spread
    if libm::sqrt(var) <= 1e-12 * scale || var == 0.0 {
        return Err(Error::DegenerateTest);
    }
    let se = libm::sqrt(var / n as f64);
    let t = md / se;
    let dof = (n - 1) as f64;
    let p = (2.0 * (1.0 - student_t_cdf(libm::fabs(t), dof))).clamp(0.0, 1.0);
    Ok(TTest { t, p, dof })
}

/// Metric values of repeated runs with their mean and population std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metric_name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub seeds: Vec<u64>,
}

impl RunReport {
    pub fn new(metric_name: &str, values: Vec<f64>, seeds: Vec<u64>) -> Self {
        RunReport {
            metric_name: metric_name.into(),
            mean: mean(&values),
            std: population_std(&values),
            values,
            seeds,
        }
    }

    pub fn compare(&self, other: &RunReport) -> Result<TTest> {
        paired_t_test(&self.values, &other.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ccc_examples() {
        let r = ccc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.ccc, 1.0);
        assert_eq!(ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().ccc, -1.0);
        // var = 1/4 each, cov = 1/4, mean gap 1 -> 0.5 / 1.5
        let c = ccc(&[0.0, 1.0], &[1.0, 2.0]).unwrap().ccc;
        assert!((c - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ccc_errors_and_degenerate() {
        assert!(matches!(ccc(&[1.0], &[1.0]), Err(Error::TooShort { .. })));
        assert!(matches!(ccc(&[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
        assert_eq!(ccc(&[2.0, 2.0], &[2.0, 2.0]).unwrap().ccc, 0.0);
    }

    #[test]
    fn ccc_loss_endpoints() {
        assert_eq!(ccc_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(ccc_loss(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(ccc_loss(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.5);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(macro_f1(&[1, 1, 0, 0], &[1, 0, 1, 0], 2).unwrap(), 0.5);
        let f = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(macro_f1(&[3], &[0], 3), Err(Error::Label(_))));
    }

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(accuracy(&[0, 1, 1, 2], &[0, 1, 2, 2]).unwrap(), 0.75);
    }

    #[test]
    fn t_test_cases() {
        let b = [0.1, 0.5, 0.3, 0.9];
        let a: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
        assert_eq!(paired_t_test(&a, &b), Err(Error::DegenerateTest));
        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn run_report_moments() {
        let r = RunReport::new("f1", vec![0.5; 10], vec![0; 10]);
        assert_eq!((r.mean, r.std), (0.5, 0.0));
        let r = RunReport::new("f1", vec![0.7], vec![3]);
        assert_eq!(r.std, 0.0);
    }
}
