//! Parameter initialization with a seedable, platform-stable RNG.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{cf, Scalar, Tensor};

/// The RNG used everywhere determinism matters. ChaCha streams are stable
/// across platforms and crate versions, unlike `StdRng`.
pub type Rng64 = ChaCha8Rng;

/// Normal(0, std) resampled until within two standard deviations.
/// Draws happen at f64 so f32 and f64 models see the same stream shape.
pub fn truncated_normal<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut Rng64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![T::zero(); numel]
    } else {
        let dist = Normal::new(0.0f64, std).expect("std must be finite and positive");
        (0..numel)
            .map(|_| {
                loop {
                    let v = dist.sample(rng);
                    if v.abs() <= 2.0 * std {
                        return cf::<T>(v);
                    }
                }
            })
            .collect()
    };
    Tensor::param(shape, data).expect("consistent by construction")
}
