//! Central finite-difference primitives for verifying backward passes.
//!
//! All checking runs at f64 with step 1e-5; training precision is never used
//! for verification.

use crate::tensor::{backward, Tensor};

/// Step size for central differences.
pub const FD_EPS: f64 = 1e-5;

/// Relative error with a floor that keeps near-zero gradient pairs from
/// registering as disagreement: |a−n| / max(|a|, |n|, 1e-3).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64, eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Compares the recorded backward pass of a scalar-valued graph against
/// central differences, one leaf input at a time. `build` must construct the
/// loss from fresh leaf tensors; it is re-invoked for every perturbed
/// evaluation. Returns the maximum relative error over all inputs.
pub fn check_loss_fn(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
) -> f64 {
    // Analytic gradients from one recorded graph.
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| Tensor::param(shape.clone(), data.clone()).expect("test input"))
        .collect();
    let loss = build(&leaves);
    assert_eq!(loss.len(), 1, "gradient check needs a scalar loss");
    backward(&loss).expect("backward on check graph");

    let mut worst = 0.0f64;
    for (idx, (shape, data)) in inputs.iter().enumerate() {
        let analytic = leaves[idx]
            .grad()
            .unwrap_or_else(|| vec![0.0; data.len()]);
        let numeric = central_diff(
            data,
            |probe| {
                let rebuilt: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (s, d))| {
                        let values = if j == idx { probe.to_vec() } else { d.clone() };
                        Tensor::from_vec(s.clone(), values).expect("test input")
                    })
                    .collect();
                build(&rebuilt).item()
            },
            FD_EPS,
        );
        assert_eq!(shape.iter().product::<usize>(), analytic.len());
        for (&a, &n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(a, n));
        }
    }
    worst
}

/// Deterministic pseudo-random values in [−1, 1] for check inputs.
pub fn check_values(len: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = crate::tensor::Rng64::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
