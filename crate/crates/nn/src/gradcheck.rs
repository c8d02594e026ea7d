//! Central finite-difference checks of graph gradients.

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Relative error `|a - n| / max(|a|, |n|)`, falling back to the absolute
/// error when both are below `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare graph gradients of the scalar built by `f` against central
/// differences for every element of every input; panics on a relative
/// error above `1e-4`.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::detached(false);
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::detached(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.input(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut ts = inputs.to_vec();
            ts[k].data_mut()[i] += STEP;
            let up = eval(&ts);
            ts[k].data_mut()[i] -= 2.0 * STEP;
            let down = eval(&ts);
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(analytic.data()[i], numeric, 1e-6);
            assert!(
                err < 1e-4,
                "input {k}[{i}]: analytic {} vs numeric {numeric} (rel {err:.3e})",
                analytic.data()[i]
            );
        }
    }
}

/// One sampled parameter entry and its check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compare the analytic gradient of each `(param, index)` entry with the
/// central difference of the scalar produced by `loss`.
pub fn check_params(
    store: &mut ParamStore,
    picks: &[(ParamId, usize)],
    loss: impl Fn(&mut Graph) -> Var,
) -> Vec<ParamCheck> {
    let grads = {
        let mut g = Graph::new(store, true);
        let l = loss(&mut g);
        g.backward(l).into_params()
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store, false);
        let l = loss(&mut g);
        g.scalar(l)
    };
    picks
        .iter()
        .map(|&(id, index)| {
            let analytic = grads.get(&id).map_or(0.0, |t| t.data()[index]);
            let orig = store.get(id).data()[index];
            store.get_mut(id).data_mut()[index] = orig + STEP;
            let up = eval(store);
            store.get_mut(id).data_mut()[index] = orig - STEP;
            let down = eval(store);
            store.get_mut(id).data_mut()[index] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            ParamCheck {
                name: store.name(id).to_string(),
                index,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, 1e-6),
            }
        })
        .collect()
}
