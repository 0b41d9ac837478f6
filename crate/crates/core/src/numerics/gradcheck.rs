//! Central finite-difference gradient checking.
//!
//! The checker re-runs a forward function with perturbed inputs and
//! never consults the reverse-mode sweep, so it serves as an
//! independent oracle for `backward`.

use crate::error::Result;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Tensor;

/// A differentiable scalar function: rebuilds its graph from leaf nodes
/// on every call (define-by-run).
pub trait ScalarFn {
    fn eval(&self, g: &mut Graph, inputs: &[NodeId]) -> Result<NodeId>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    fn eval(&self, g: &mut Graph, inputs: &[NodeId]) -> Result<NodeId> {
        self(g, inputs)
    }
}

fn run_forward(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f.eval(&mut g, &ids)?;
    Ok(g.value(out).item())
}

/// Analytic gradients of `f` at `inputs` via reverse mode.
pub fn analytic_grads(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let out = f.eval(&mut g, &ids)?;
    let grads = g.backward(out)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
        .collect())
}

/// Central finite differences with the given step, optionally restricted
/// to `coords_per_tensor` coordinates (`None` checks all of them).
/// Returns per-input tensors holding FD gradients at checked coordinates
/// and NaN elsewhere.
pub fn central_diff_grads(
    f: &impl ScalarFn,
    inputs: &[Tensor],
    step: f64,
    coords_per_tensor: Option<usize>,
    seed: u64,
) -> Result<Vec<Tensor>> {
    use rand::seq::SliceRandom;
    let mut rng = crate::seeding::rng_for(seed, "gradcheck-coords");
    let mut out = Vec::with_capacity(inputs.len());
    for (ti, t) in inputs.iter().enumerate() {
        let mut fd = vec![f64::NAN; t.numel()];
        let coords: Vec<usize> = match coords_per_tensor {
            Some(limit) if limit < t.numel() => {
                let mut all: Vec<usize> = (0..t.numel()).collect();
                all.shuffle(&mut rng);
                all.truncate(limit);
                all
            }
            _ => (0..t.numel()).collect(),
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[c] += step;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[c] -= step;
            fd[c] = (run_forward(f, &plus)? - run_forward(f, &minus)?) / (2.0 * step);
        }
        out.push(Tensor::new(t.shape().to_vec(), fd)?);
    }
    Ok(out)
}

/// Maximum relative error between analytic and finite-difference
/// gradients over the checked coordinates:
/// `|a - fd| / max(|a|, |fd|, 1)`.
pub fn max_rel_error(analytic: &[Tensor], fd: &[Tensor]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, f) in analytic.iter().zip(fd) {
        for (&av, &fv) in a.data().iter().zip(f.data()) {
            if fv.is_nan() {
                continue; // unchecked coordinate
            }
            let denom = av.abs().max(fv.abs()).max(1.0);
            worst = worst.max((av - fv).abs() / denom);
        }
    }
    worst
}

/// One-call check: returns the max relative error.
pub fn check(
    f: &impl ScalarFn,
    inputs: &[Tensor],
    step: f64,
    coords_per_tensor: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let a = analytic_grads(f, inputs)?;
    let fd = central_diff_grads(f, inputs, step, coords_per_tensor, seed)?;
    Ok(max_rel_error(&a, &fd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        let f = |g: &mut Graph, xs: &[NodeId]| {
            let sq = g.mul(xs[0], xs[0])?;
            g.sum(sq)
        };
        let x = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let err = check(&f, &[x], 1e-3, None, 0).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn deliberate_mismatch_is_caught() {
        // d/dx of tanh hits the checker; but comparing tanh's analytic
        // grads against a *different* function's FD must fail loudly.
        let f_analytic = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.tanh(xs[0])?;
            g.sum(y)
        };
        let f_other = |g: &mut Graph, xs: &[NodeId]| {
            let y = g.relu(xs[0])?;
            g.sum(y)
        };
        let x = Tensor::vector(vec![0.4, 0.9]);
        let a = analytic_grads(&f_analytic, &[x.clone()]).unwrap();
        let fd = central_diff_grads(&f_other, &[x], 1e-3, None, 0).unwrap();
        assert!(max_rel_error(&a, &fd) > 1e-2);
    }
}
