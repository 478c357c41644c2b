//! Finite-difference validation of analytic gradients.
//!
//! Central differences (f(x+h) - f(x-h)) / 2h at randomly sampled coordinates
//! are compared against the gradients from a reverse pass. The whole loss is
//! recomputed for every probe, so callers keep inputs small.
//!
//! Central differences are only valid where the loss is smooth across the
//! probe window. Rectifier kinks inside (x-h, x+h) make the two one-sided
//! differences disagree by the slope jump; such probes are detected and
//! redrawn rather than compared, since no conclusion about the analytic
//! gradient follows from them.

use ndarray::ArrayD;
use rand::Rng;

use crate::autograd::{Graph, Var};

/// Worst relative error between analytic and numeric gradients.
///
/// `build` must construct the same scalar loss from the given leaves on every
/// call. `probes` coordinates are sampled per input; each is perturbed by
/// `step` in both directions. Relative error is |a - n| / max(|a|, |n|, 1e-8).
pub fn check_gradients<F>(
    inputs: &[ArrayD<f64>],
    probes: usize,
    step: f64,
    rng: &mut impl Rng,
    build: F,
) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |inputs: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let loss = build(&mut g, &vars);
        g.scalar(loss)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let loss = build(&mut g, &vars);
    let base = g.scalar(loss);
    let grads = g.backward(loss).expect("gradcheck backward");

    let mut worst = 0.0f64;
    for (vi, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[vi])
            .expect("input does not influence the loss");
        let analytic = analytic.as_slice().expect("contiguous gradient");
        let n = input.len();
        for _ in 0..probes.min(n) {
            let mut numeric = 0.0;
            let mut idx = 0;
            for attempt in 0..8 {
                idx = rng.random_range(0..n);
                let mut plus = inputs.to_vec();
                plus[vi].as_slice_mut().unwrap()[idx] += step;
                let mut minus = inputs.to_vec();
                minus[vi].as_slice_mut().unwrap()[idx] -= step;
                let fwd = (eval(&plus) - base) / step;
                let bwd = (base - eval(&minus)) / step;
                numeric = 0.5 * (fwd + bwd);
                // a slope jump above 2e-3 of scale could push the central
                // difference past the usual 1e-3 tolerance; smooth curvature
                // sits well below this at the steps callers use
                let jump = (fwd - bwd).abs();
                if jump <= 2e-3 * fwd.abs().max(bwd.abs()) + 1e-9 || attempt == 7 {
                    break;
                }
            }
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn catches_a_wrong_gradient() {
        // loss = mean(x^2): a deliberately wrong composition (abs of detached
        // values) must produce a large relative error, proving the checker
        // is not vacuous.
        let mut rng = crate::rng::derive(3, "gradcheck-meta");
        let x = ArrayD::from_shape_fn(IxDyn(&[8]), |_| rng.random_range(0.5..1.5));

        let rel_ok = check_gradients(&[x.clone()], 8, 1e-4, &mut rng, |g, vars| {
            let y = g.square(vars[0]);
            g.mean_all(y)
        });
        assert!(rel_ok < 1e-6, "correct gradient flagged: {rel_ok}");

        // scale(x, 3) claims dl/dx = 3/n but we compare against mean(x^2)'s
        // numeric gradient by rebuilding a different loss per evaluation.
        let call = std::cell::Cell::new(0usize);
        let rel_bad = check_gradients(&[x], 8, 1e-4, &mut rng, |g, vars| {
            call.set(call.get() + 1);
            if call.get() == 1 {
                // first call records the analytic graph: linear loss
                let y = g.scale(vars[0], 3.0);
                g.mean_all(y)
            } else {
                // later calls (numeric probes) evaluate a quadratic loss
                let y = g.square(vars[0]);
                g.mean_all(y)
            }
        });
        assert!(rel_bad > 1e-2, "mismatched gradients not caught: {rel_bad}");
    }
}
