//! Central finite-difference verification of [`Graph::backward`].

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Worst per-tensor relative error found by [`check_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub worst_param: String,
    pub worst_rel_err: f64,
    pub checked: usize,
}

/// `||a - b|| / max(||a||, ||b||, 1e-5)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-5)
}

fn eval(store: &ParamStore, build: &dyn Fn(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new(store, true);
    let l = build(&mut g)?;
    Ok(g.value(l).item())
}

/// Compare analytic gradients of the scalar built by `build` with central
/// differences of step `h`, for up to `per_tensor` evenly spaced entries of
/// every trainable parameter.
pub fn check_params(
    store: &ParamStore,
    build: &dyn Fn(&mut Graph) -> Result<Var>,
    h: f64,
    per_tensor: usize,
) -> Result<GradCheck> {
    let grads = {
        let mut g = Graph::new(store, true);
        let l = build(&mut g)?;
        g.backward(l)?
    };
    let mut work = store.clone();
    let mut worst = GradCheck { worst_param: String::new(), worst_rel_err: 0.0, checked: 0 };
    for id in 0..store.len() {
        let e = store.entry(id);
        if !e.trainable {
            continue;
        }
        let n = e.value.len();
        let step = n.div_ceil(per_tensor.max(1)).max(1);
        let idx: Vec<usize> = (0..n).step_by(step).collect();
        let analytic: Vec<f64> = match grads.get(id) {
            Some(g) => idx.iter().map(|&i| g.data()[i]).collect(),
            None => idx.iter().map(|_| 0.0).collect(),
        };
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work, build)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work, build)?;
            work.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let err = relative_error(&analytic, &numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite(alloc::format!("gradient check of '{}'", e.name)));
        }
        worst.checked += idx.len();
        if err > worst.worst_rel_err || worst.worst_param.is_empty() {
            worst.worst_rel_err = err;
            worst.worst_param = e.name.clone();
        }
    }
    Ok(worst)
}
