//! Central finite-difference checks for graph-built losses.

use crate::graph::{Graph, Var};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Matrix;

pub const NORM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, NORM_FLOOR)` in the
    /// Euclidean norm. The floor keeps tensors whose true gradient is zero
    /// (such as attention key biases) from dividing rounding noise by itself.
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Compares the tape gradient of `loss` against central differences for
/// every trainable tensor in `store`. `loss` must build a scalar on the
/// graph it is given and be a deterministic function of the parameters.
pub fn check_gradients<F>(store: &ParamStore, eps: f64, loss: F) -> Vec<TensorCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store);
    let mut analytic = Gradients::zeros_like(store);
    g.backward(out, 1.0).accumulate_into(&mut analytic);

    let eval = |s: &ParamStore| {
        let mut g = Graph::inference();
        let v = loss(&mut g, s);
        g.scalar(v)
    };

    let mut probe = store.clone();
    let mut out = Vec::new();
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let (rows, cols) = store.get(id).shape();
        let mut numeric = Matrix::zeros(rows, cols);
        for i in 0..rows * cols {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        let a = analytic.get(id);
        let diff = a.zip_map(&numeric, |x, y| x - y).norm_sq().sqrt();
        let an = a.norm_sq().sqrt();
        let nn = numeric.norm_sq().sqrt();
        let relative_error = diff / an.max(nn).max(NORM_FLOOR);
        out.push(TensorCheck { name: store.name(id).to_string(), relative_error, analytic_norm: an });
    }
    out
}

/// Largest relative error across tensors, or 0 when nothing is trainable.
pub fn worst(checks: &[TensorCheck]) -> f64 {
    checks.iter().map(|c| c.relative_error).fold(0.0, f64::max)
}
