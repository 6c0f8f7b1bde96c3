//! Multi-kernel pyramid over the point-feature grid.
//!
//! The N×C feature map is treated as a one-channel 2-D grid. Four parallel
//! branches convolve it with different kernel sizes and strides, normalize
//! and rectify, bilinearly upsample back to N×C, and concatenate — giving
//! every point context at four semantic resolutions. Fusion is plain
//! concatenation; no attention weighting is applied.

use crate::error::{Error, Result};
use crate::nn::BatchNorm;
use crate::tensor::{ops, Rng64, Scalar, Tensor};

/// Kernel sizes, strides, and output channels of the four branches. The
/// defaults make the fused map 32 channels wide (8 per branch).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidConfig {
    pub branch_kernels: [usize; 4],
    pub branch_strides: [usize; 4],
    pub branch_channels: [usize; 4],
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            branch_kernels: [1, 3, 5, 7],
            branch_strides: [1, 2, 4, 8],
            branch_channels: [8, 8, 8, 8],
        }
    }
}

impl PyramidConfig {
    /// `strict_channels` additionally pins the fused width to 32, the
    /// reference-architecture shape.
    pub fn validate(&self, strict_channels: bool) -> Result<()> {
        for &k in &self.branch_kernels {
            if k % 2 == 0 {
                return Err(Error::config(format!(
                    "pyramid kernel extents must be odd, got {}",
                    k
                )));
            }
        }
        for &s in &self.branch_strides {
            if s == 0 {
                return Err(Error::config("pyramid strides must be >= 1"));
            }
        }
        if self.branch_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("pyramid branch channels must be >= 1"));
        }
        if strict_channels && self.fused_channels() != 32 {
            return Err(Error::config(format!(
                "pyramid branch channels must sum to 32, got {}",
                self.fused_channels()
            )));
        }
        Ok(())
    }

    pub fn fused_channels(&self) -> usize {
        self.branch_channels.iter().sum()
    }
}

/// One pyramid branch: same-padded strided convolution over the grid,
/// batch-norm + ReLU over the downsampled positions, bilinear upsample back
/// to the input extents.
pub struct PanBranch<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bn: BatchNorm<T>,
    pub kernel_size: usize,
    pub stride: usize,
    pub out_channels: usize,
}

impl<T: Scalar> PanBranch<T> {
    pub fn new(
        kernel_size: usize,
        stride: usize,
        out_channels: usize,
        init_std: f64,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::config(format!(
                "pyramid kernel extents must be odd, got {}",
                kernel_size
            )));
        }
        let kernel = crate::tensor::truncated_normal(
            vec![kernel_size, kernel_size, 1, out_channels],
            init_std,
            rng,
        );
        Ok(PanBranch {
            kernel,
            bn: BatchNorm::new(out_channels),
            kernel_size,
            stride,
            out_channels,
        })
    }

    /// [N, C] (or [N, C, 1]) grid in, [N, C, out_channels] out.
    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let grid = as_grid(x)?;
        let (n, c) = (grid.shape()[0], grid.shape()[1]);
        let conv = ops::conv2d(&grid, &self.kernel, (self.stride, self.stride))?;
        let (ho, wo) = (conv.shape()[0], conv.shape()[1]);
        let flat = ops::reshape(&conv, vec![ho * wo, self.out_channels])?;
        let normed = self.bn.forward(&flat, training)?;
        let active = ops::relu(&normed);
        let back = ops::reshape(&active, vec![ho, wo, self.out_channels])?;
        ops::bilinear_resize(&back, (n, c))
    }
}

fn as_grid<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.rank() {
        2 => ops::reshape(x, vec![x.shape()[0], x.shape()[1], 1]),
        3 if x.shape()[2] == 1 => Ok(x.clone()),
        _ => Err(Error::config(format!(
            "pyramid expects an N x C grid (or N x C x 1), got {:?}",
            x.shape()
        ))),
    }
}

/// The four branches plus their static configuration.
pub struct PanModule<T: Scalar> {
    pub branches: Vec<PanBranch<T>>,
    pub config: PyramidConfig,
}

impl<T: Scalar> PanModule<T> {
    pub fn new(
        config: PyramidConfig,
        strict_channels: bool,
        init_std: f64,
        rng: &mut Rng64,
    ) -> Result<Self> {
        config.validate(strict_channels)?;
        let mut branches = Vec::with_capacity(4);
        for i in 0..4 {
            branches.push(PanBranch::new(
                config.branch_kernels[i],
                config.branch_strides[i],
                config.branch_channels[i],
                init_std,
                rng,
            )?);
        }
        Ok(PanModule { branches, config })
    }

    /// [N, C] in, [N, C, fused_channels] out.
    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let outs: Vec<Tensor<T>> = self
            .branches
            .iter()
            .map(|b| b.forward(x, training))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        ops::concat_last(&refs)
    }
}

/// Mean over the C axis: [N, C, K] → [N, 1, K].
pub fn pan_collapse<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::config(format!(
            "pan_collapse expects [N, C, K], got {:?}",
            x.shape()
        )));
    }
    ops::mean_axis(x, 1, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> Rng64 {
        Rng64::seed_from_u64(123)
    }

    #[test]
    fn default_config_fuses_to_32_channels() {
        let c = PyramidConfig::default();
        c.validate(true).unwrap();
        assert_eq!(c.fused_channels(), 32);
    }

    #[test]
    fn bad_channel_budget_fails_strict_validation() {
        let c = PyramidConfig {
            branch_channels: [8, 8, 8, 4],
            ..PyramidConfig::default()
        };
        assert!(c.validate(true).is_err());
        assert!(c.validate(false).is_ok());
    }

    #[test]
    fn even_kernel_is_config_error() {
        let c = PyramidConfig {
            branch_kernels: [1, 2, 5, 7],
            ..PyramidConfig::default()
        };
        assert!(matches!(c.validate(false), Err(Error::Config(_))));
    }

    #[test]
    fn branch_output_keeps_the_grid_shape() {
        let mut r = rng();
        for (k, s) in [(1usize, 1usize), (3, 2), (5, 4), (7, 8)] {
            let branch = PanBranch::<f64>::new(k, s, 8, 0.1, &mut r).unwrap();
            let x = Tensor::from_vec(vec![16, 12], vec![0.3; 192]).unwrap();
            let y = branch.forward(&x, false).unwrap();
            assert_eq!(y.shape(), &[16, 12, 8]);
        }
    }

    #[test]
    fn kernel_1_stride_1_branch_does_no_spatial_mixing() {
        // A 1x1 kernel makes each output cell depend on its own cell only;
        // with inference batch norm at fresh stats this is a per-cell linear
        // map pushed through ReLU.
        let mut r = rng();
        let branch = PanBranch::<f64>::new(1, 1, 2, 0.1, &mut r).unwrap();
        let k0 = branch.kernel.to_vec();
        let mut data = vec![0.0; 6 * 4];
        data[2 * 4 + 1] = 5.0;
        let x = Tensor::from_vec(vec![6, 4], data).unwrap();
        let y = branch.forward(&x, false).unwrap();
        let yd = y.to_vec();
        let eps = crate::nn::batchnorm::BN_EPS;
        let invstd = 1.0 / (1.0f64 + eps).sqrt();
        for cell in 0..24 {
            for co in 0..2 {
                let expect = (5.0 * k0[co] * invstd).max(0.0);
                let got = yd[cell * 2 + co];
                if cell == 2 * 4 + 1 {
                    assert!((got - expect).abs() < 1e-9, "{} vs {}", got, expect);
                } else {
                    assert!(got.abs() < 1e-12, "cell {} leaked {}", cell, got);
                }
            }
        }
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        // Same-padded convolution of a constant is constant away from the
        // borders; downsample + upsample of that constant stays constant in
        // the interior of an 8x8 grid.
        let mut r = rng();
        let branch = PanBranch::<f64>::new(3, 1, 4, 0.1, &mut r).unwrap();
        let x = Tensor::from_vec(vec![8, 8], vec![1.5; 64]).unwrap();
        let y = branch.forward(&x, false).unwrap().to_vec();
        for iy in 1..7 {
            for ix in 1..7 {
                for c in 0..4 {
                    let v = y[(iy * 8 + ix) * 4 + c];
                    let v0 = y[(3 * 8 + 3) * 4 + c];
                    assert!((v - v0).abs() < 1e-9, "interior not constant");
                }
            }
        }
    }

    #[test]
    fn fused_module_reaches_the_reference_shape() {
        let mut r = rng();
        let pan = PanModule::<f64>::new(PyramidConfig::default(), true, 0.1, &mut r).unwrap();
        let x = Tensor::from_vec(vec![128, 64], vec![0.25; 128 * 64]).unwrap();
        let y = pan.forward(&x, false).unwrap();
        assert_eq!(y.shape(), &[128, 64, 32]);
        let c = pan_collapse(&y).unwrap();
        assert_eq!(c.shape(), &[128, 1, 32]);
    }

    #[test]
    fn zero_input_is_uniform_across_the_grid() {
        let mut r = rng();
        let pan = PanModule::<f64>::new(PyramidConfig::default(), true, 0.1, &mut r).unwrap();
        let x = Tensor::from_vec(vec![16, 64], vec![0.0; 16 * 64]).unwrap();
        let y = pan.forward(&x, false).unwrap().to_vec();
        // Convolving zeros gives zeros everywhere; BN beta starts at zero so
        // every grid cell carries the same (zero) value per channel.
        let first = &y[..32];
        for cell in 1..16 * 64 {
            for ch in 0..32 {
                assert!((y[cell * 32 + ch] - first[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_larger_than_grid_is_config_error() {
        let mut r = rng();
        let branch = PanBranch::<f64>::new(3, 8, 2, 0.1, &mut r).unwrap();
        let x = Tensor::from_vec(vec![4, 16], vec![0.0; 64]).unwrap();
        assert!(matches!(
            branch.forward(&x, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn collapse_of_constant_is_constant() {
        let x = Tensor::from_vec(vec![5, 7, 3], vec![2.25; 105]).unwrap();
        let y = pan_collapse(&x).unwrap();
        assert_eq!(y.shape(), &[5, 1, 3]);
        assert!(y.to_vec().iter().all(|&v| (v - 2.25).abs() < 1e-12));
    }
}
