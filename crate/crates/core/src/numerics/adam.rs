//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::numerics::params::ParamSet;
use crate::numerics::tensor::Tensor;

/// Optimizer state: one pair of moment buffers per parameter, in the
/// parameter set's order. Moments always match their parameter's shape.
pub struct AdamState {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let first = params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        let second = params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: first,
            second_moment: second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over all parameters. Gradients must be supplied in
    /// parameter order; a NaN/inf gradient aborts the run naming the
    /// offending parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (name, p)) in params.entries_mut().enumerate() {
            let g = &grads[i];
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    param: name.to_string(),
                    step: self.step,
                });
            }
            assert_eq!(g.shape(), p.shape(), "gradient shape for {name}");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let pd = p.data_mut();
            for ((pv, &gv), (mv, vv)) in pd.iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(data: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("x", Tensor::vector(data));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = single_param(vec![1.0, -2.0]);
        let mut adam = AdamState::new(0.1, &params);
        adam.step(&mut params, &[Tensor::vector(vec![0.0, 0.0])]).unwrap();
        assert_eq!(params.get("x").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_magnitude_is_at_most_lr() {
        // With bias correction the first update is lr * g/(|g| + eps).
        let lr = 0.05;
        for &gval in &[3.0, -0.2, 1e-4] {
            let mut params = single_param(vec![0.7]);
            let mut adam = AdamState::new(lr, &params);
            adam.step(&mut params, &[Tensor::vector(vec![gval])]).unwrap();
            let delta = (params.get("x").unwrap().data()[0] - 0.7).abs();
            assert!(delta <= lr * (1.0 + 1e-6), "delta {delta} exceeds lr {lr}");
            assert!(delta > 0.0);
        }
    }

    #[test]
    fn nan_gradient_aborts_naming_parameter() {
        let mut params = single_param(vec![0.0]);
        let mut adam = AdamState::new(0.1, &params);
        let err = adam
            .step(&mut params, &[Tensor::vector(vec![f64::NAN])])
            .unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
    }

    #[test]
    fn step_counter_strictly_increases() {
        let mut params = single_param(vec![0.0]);
        let mut adam = AdamState::new(0.1, &params);
        for want in 1..=3 {
            adam.step(&mut params, &[Tensor::vector(vec![1.0])]).unwrap();
            assert_eq!(adam.step_count(), want);
        }
    }
}
