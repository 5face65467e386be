//! Central finite-difference gradient checking.
//!
//! The reported error for each scalar entry is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-5)`; the floor keeps
//! entries whose true gradient is ~0 from dominating through roundoff.

use crate::graph::{Graph, Var};
use crate::nn::params::ParamStore;
use crate::tensor::Tensor;

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Max relative error of gradients w.r.t. differentiable inputs.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Max relative error of gradients w.r.t. every scalar in `store`.
///
/// `max_per_tensor` bounds the number of entries probed per tensor (evenly
/// strided) so large embedding tables stay cheap.
pub fn check_params<F>(store: &ParamStore, max_per_tensor: usize, f: F) -> f64
where
    F: Fn(&mut Graph) -> Var,
{
    let eval = |s: &ParamStore| {
        let mut g = Graph::with_params(s);
        let out = f(&mut g);
        g.scalar(out)
    };
    let mut g = Graph::with_params(store);
    let out = f(&mut g);
    let grads = g.backward(out);
    let pg = g.param_grads(&grads);
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let stride = (n / max_per_tensor.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = pg.get(id).map_or(0.0, |t| t.data()[i]);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}
