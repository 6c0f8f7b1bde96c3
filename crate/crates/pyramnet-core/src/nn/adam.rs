//! Bias-corrected Adam parameter updates.

use crate::error::{Error, Result};
use crate::tensor::{cf, Scalar};

/// Optimizer hyperparameters. beta1 carries the momentum 0.9; beta2 and
/// epsilon take the framework-standard defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators and step count.
pub struct AdamState<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected update of `param` in place. `t` increments by exactly
/// one; nonfinite gradients abort with an error naming the parameter.
pub fn adam_step<T: Scalar>(
    name: &str,
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() || param.len() != state.v.len() {
        return Err(Error::internal(format!(
            "adam_step on {}: param/grad/moment lengths disagree ({}, {}, {}, {})",
            name,
            param.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Train(format!(
            "nonfinite gradient for parameter {}",
            name
        )));
    }
    state.t += 1;
    let b1 = cf::<T>(hyper.beta1);
    let b2 = cf::<T>(hyper.beta2);
    let one = T::one();
    let lr = cf::<T>(hyper.lr);
    let eps = cf::<T>(hyper.epsilon);
    let c1 = cf::<T>(1.0 - hyper.beta1.powi(state.t as i32));
    let c2 = cf::<T>(1.0 - hyper.beta2.powi(state.t as i32));

    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_increments_t() {
        let mut p = vec![1.5f64, -0.5];
        let mut st = AdamState::new(2);
        adam_step("w", &mut p, &[0.0, 0.0], &mut st, &AdamHyper::default()).unwrap();
        assert_eq!(p, vec![1.5, -0.5]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr/(1+eps).
        let hyper = AdamHyper::default();
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        adam_step("w", &mut p, &[1.0], &mut st, &hyper).unwrap();
        let expect = -hyper.lr / (1.0 + hyper.epsilon);
        assert!((p[0] - expect).abs() < 1e-15, "{} vs {}", p[0], expect);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // L(x) = x²/2, gradient x; two successive steps from x = 1.
        let hyper = AdamHyper::default();
        let mut x = vec![1.0f64];
        let mut st = AdamState::new(1);
        let mut losses = vec![0.5 * x[0] * x[0]];
        for _ in 0..2 {
            let g = vec![x[0]];
            adam_step("x", &mut x, &g, &mut st, &hyper).unwrap();
            losses.push(0.5 * x[0] * x[0]);
        }
        assert!(losses[1] < losses[0] && losses[2] < losses[1], "{:?}", losses);
    }

    #[test]
    fn nonfinite_gradient_names_the_parameter() {
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        let err = adam_step("stem.w", &mut p, &[f64::NAN], &mut st, &AdamHyper::default())
            .unwrap_err();
        assert!(err.to_string().contains("stem.w"));
        assert!(st.v.iter().all(|&v| v >= 0.0));
    }
}
