//! Central finite differences over every scalar of a [`ParamStore`], used to
//! validate the analytic gradients of the tape.

use ndarray::Array2;

use crate::autograd::{Mat, ParamStore};

/// Tensors whose gradients are both below this L2 norm are compared absolutely.
pub const NORM_FLOOR: f64 = 1e-4;

/// `||a - n|| / max(||a|| + ||n||, NORM_FLOOR)`.
pub fn relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    let norm = |m: &Mat| m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&(analytic - numeric));
    diff / (norm(analytic) + norm(numeric)).max(NORM_FLOOR)
}

/// Numeric gradients of every scalar output of `f` with respect to every
/// parameter entry. `f` returns several losses at once so one pair of
/// evaluations serves all of them.
pub fn finite_differences(
    store: &ParamStore,
    eps: f64,
    outputs: usize,
    f: impl Fn(&ParamStore) -> Vec<f64>,
) -> Vec<Vec<Mat>> {
    let mut grads: Vec<Vec<Mat>> = (0..outputs)
        .map(|_| store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect())
        .collect();
    let mut work = store.clone();
    for (pid, p) in store.iter() {
        for idx in 0..p.value.len() {
            let orig = p.value.as_slice().expect("contiguous parameter")[idx];
            work.get_mut(pid).value.as_slice_mut().unwrap()[idx] = orig + eps;
            let plus = f(&work);
            work.get_mut(pid).value.as_slice_mut().unwrap()[idx] = orig - eps;
            let minus = f(&work);
            work.get_mut(pid).value.as_slice_mut().unwrap()[idx] = orig;
            for k in 0..outputs {
                grads[k][pid.0].as_slice_mut().unwrap()[idx] = (plus[k] - minus[k]) / (2.0 * eps);
            }
        }
    }
    grads
}

/// Worst per-tensor relative error and the offending parameter name.
pub fn worst_relative_error(store: &ParamStore, analytic: &[Mat], numeric: &[Mat]) -> (f64, String) {
    store
        .iter()
        .map(|(pid, p)| (relative_error(&analytic[pid.0], &numeric[pid.0]), p.name.clone()))
        .fold((0.0, String::new()), |acc, x| if x.0 > acc.0 { x } else { acc })
}
