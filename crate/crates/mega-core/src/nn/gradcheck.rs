use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::graph::{Graph, NodeId};
use crate::nn::params::ParamSet;

pub const FD_STEP: f64 = 1e-5;

/// Compare reverse-mode gradients against central finite differences on
/// randomly selected coordinates of every parameter.
///
/// `build` must assemble the same scalar computation each time it is called;
/// gradcheck re-runs it at perturbed parameter values. Returns the maximum
/// relative error, with the relative scale floored at 1 so that near-zero
/// gradients are compared absolutely.
pub fn gradcheck<F>(build: F, params: &ParamSet, seed: u64, coords_per_param: usize) -> f64
where
    F: Fn(&mut Graph) -> NodeId,
{
    let grads = {
        let mut g = Graph::new(params);
        let loss = build(&mut g);
        g.backward(loss)
    };

    let eval = |p: &ParamSet| -> f64 {
        let mut g = Graph::new(p);
        let loss = build(&mut g);
        g.value(loss).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut max_rel: f64 = 0.0;
    for p in 0..params.len() {
        let n = params.value(p).len();
        for _ in 0..coords_per_param.min(n) {
            let j = rng.random_range(0..n);
            let orig = work.value(p).data[j];
            work.value_mut(p).data[j] = orig + FD_STEP;
            let fp = eval(&work);
            work.value_mut(p).data[j] = orig - FD_STEP;
            let fm = eval(&work);
            work.value_mut(p).data[j] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let ad = grads.get(p).map(|t| t.data[j]).unwrap_or(0.0);
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
