//! Batch normalization over [rows, channels] maps with running statistics.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{cf, Scalar, Tensor};

/// Variance guard. Small enough that the normalized output variance stays
/// within 1e-5 of 1 for unit-scale inputs.
pub const BN_EPS: f64 = 1e-6;

/// Decay schedule for the running-statistic update: starts at `base` and
/// rises toward `cap` as `1 − base·rate^(epoch/epochs_per)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnSchedule {
    pub base: f64,
    pub rate: f64,
    pub epochs_per: f64,
    pub cap: f64,
}

impl Default for BnSchedule {
    fn default() -> Self {
        BnSchedule {
            base: 0.5,
            rate: 0.5,
            epochs_per: 20.0,
            cap: 0.999,
        }
    }
}

impl BnSchedule {
    pub fn decay_at(&self, epoch: usize) -> f64 {
        let d = 1.0 - self.base * self.rate.powf(epoch as f64 / self.epochs_per);
        d.min(self.cap)
    }
}

/// Decay value of the default schedule at an epoch (0.5 at epoch 0, capped
/// at 0.999).
pub fn bn_decay_at_epoch(epoch: usize) -> f64 {
    BnSchedule::default().decay_at(epoch)
}

/// Per-channel scale/shift parameters and running statistics.
///
/// Running buffers are shared handles so checkpoints can read and restore
/// them without going through the layer.
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Rc<RefCell<Vec<T>>>,
    pub running_var: Rc<RefCell<Vec<T>>>,
    decay: Cell<f64>,
    channels: usize,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::param(vec![channels], vec![T::one(); channels])
                .expect("consistent by construction"),
            beta: Tensor::param(vec![channels], vec![T::zero(); channels])
                .expect("consistent by construction"),
            running_mean: Rc::new(RefCell::new(vec![T::zero(); channels])),
            running_var: Rc::new(RefCell::new(vec![T::one(); channels])),
            decay: Cell::new(BnSchedule::default().decay_at(0)),
            channels,
        }
    }

    /// Builds a layer around existing parameter tensors (gradient checks
    /// wire perturbable leaves in this way).
    pub fn from_parts(gamma: Tensor<T>, beta: Tensor<T>) -> Self {
        let channels = gamma.len();
        BatchNorm {
            gamma,
            beta,
            running_mean: Rc::new(RefCell::new(vec![T::zero(); channels])),
            running_var: Rc::new(RefCell::new(vec![T::one(); channels])),
            decay: Cell::new(BnSchedule::default().decay_at(0)),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn decay(&self) -> f64 {
        self.decay.get()
    }

    pub fn set_decay(&self, decay: f64) {
        self.decay.set(decay.clamp(0.0, 1.0));
    }

    /// Training mode normalizes by batch statistics (biased variance) and
    /// folds them into the running buffers at the current decay; inference
    /// mode normalizes by the running buffers. Differentiable through the
    /// batch statistics.
    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.shape()[1] != self.channels {
            return Err(Error::Dim {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: vec![self.channels],
            });
        }
        let rows = x.shape()[0];
        if training && rows < 2 {
            return Err(Error::config(
                "batch_norm in training mode needs at least 2 rows (variance undefined for 1)",
            ));
        }
        if training {
            self.forward_train(x, rows)
        } else {
            self.forward_eval(x, rows)
        }
    }

    fn forward_train(&self, x: &Tensor<T>, rows: usize) -> Result<Tensor<T>> {
        let c = self.channels;
        let inv_rows = cf::<T>(1.0 / rows as f64);
        let eps = cf::<T>(BN_EPS);
        let xd = x.data();

        let mut mean = vec![T::zero(); c];
        for row in xd.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        for m in mean.iter_mut() {
            *m = *m * inv_rows;
        }
        let mut var = vec![T::zero(); c];
        for row in xd.chunks(c) {
            for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *vv = *vv + d * d;
            }
        }
        for vv in var.iter_mut() {
            *vv = *vv * inv_rows;
        }
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let gd = self.gamma.to_vec();
        let bd = self.beta.to_vec();
        let mut xhat = vec![T::zero(); rows * c];
        let mut out = vec![T::zero(); rows * c];
        for (r, row) in xd.chunks(c).enumerate() {
            for j in 0..c {
                let h = (row[j] - mean[j]) * invstd[j];
                xhat[r * c + j] = h;
                out[r * c + j] = gd[j] * h + bd[j];
            }
        }
        drop(xd);

        // Fold batch statistics into the running buffers.
        let decay = cf::<T>(self.decay.get());
        let one_minus = T::one() - decay;
        {
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            for j in 0..c {
                rm[j] = decay * rm[j] + one_minus * mean[j];
                rv[j] = decay * rv[j] + one_minus * var[j];
            }
        }

        let px = x.clone();
        let pg = self.gamma.clone();
        let pb = self.beta.clone();
        let xhat_saved = xhat;
        let invstd_saved = invstd;
        Ok(Tensor::from_op(
            x.shape().to_vec(),
            out,
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            move || {
                Box::new(move |gout: &[T]| {
                    let c = invstd_saved.len();
                    let rows = gout.len() / c;
                    let gd = pg.to_vec();
                    // Channel sums of gout and gout·xhat feed every term.
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gh = vec![T::zero(); c];
                    for (r, grow) in gout.chunks(c).enumerate() {
                        for j in 0..c {
                            sum_g[j] = sum_g[j] + grow[j];
                            sum_gh[j] = sum_gh[j] + grow[j] * xhat_saved[r * c + j];
                        }
                    }
                    if pg.requires_grad() {
                        pg.accumulate_grad(&sum_gh);
                    }
                    if pb.requires_grad() {
                        pb.accumulate_grad(&sum_g);
                    }
                    if px.requires_grad() {
                        let inv_rows = cf::<T>(1.0 / rows as f64);
                        px.with_grad_mut(|g| {
                            for r in 0..rows {
                                for j in 0..c {
                                    let gy = gout[r * c + j];
                                    let h = xhat_saved[r * c + j];
                                    let term = gy - inv_rows * (sum_g[j] + h * sum_gh[j]);
                                    g[r * c + j] =
                                        g[r * c + j] + gd[j] * invstd_saved[j] * term;
                                }
                            }
                        });
                    }
                })
            },
        ))
    }

    fn forward_eval(&self, x: &Tensor<T>, rows: usize) -> Result<Tensor<T>> {
        let c = self.channels;
        let eps = cf::<T>(BN_EPS);
        let rm = self.running_mean.borrow().clone();
        let invstd: Vec<T> = self
            .running_var
            .borrow()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let gd = self.gamma.to_vec();
        let bd = self.beta.to_vec();
        let xd = x.data();
        let mut xhat = vec![T::zero(); rows * c];
        let mut out = vec![T::zero(); rows * c];
        for (r, row) in xd.chunks(c).enumerate() {
            for j in 0..c {
                let h = (row[j] - rm[j]) * invstd[j];
                xhat[r * c + j] = h;
                out[r * c + j] = gd[j] * h + bd[j];
            }
        }
        drop(xd);

        let px = x.clone();
        let pg = self.gamma.clone();
        let pb = self.beta.clone();
        Ok(Tensor::from_op(
            x.shape().to_vec(),
            out,
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            move || {
                Box::new(move |gout: &[T]| {
                    let c = invstd.len();
                    if pg.requires_grad() || pb.requires_grad() {
                        let mut sum_g = vec![T::zero(); c];
                        let mut sum_gh = vec![T::zero(); c];
                        for (r, grow) in gout.chunks(c).enumerate() {
                            for j in 0..c {
                                sum_g[j] = sum_g[j] + grow[j];
                                sum_gh[j] = sum_gh[j] + grow[j] * xhat[r * c + j];
                            }
                        }
                        if pg.requires_grad() {
                            pg.accumulate_grad(&sum_gh);
                        }
                        if pb.requires_grad() {
                            pb.accumulate_grad(&sum_g);
                        }
                    }
                    if px.requires_grad() {
                        let gd = pg.to_vec();
                        px.with_grad_mut(|g| {
                            for (r, grow) in gout.chunks(c).enumerate() {
                                for j in 0..c {
                                    g[r * c + j] =
                                        g[r * c + j] + grow[j] * gd[j] * invstd[j];
                                }
                            }
                        });
                    }
                })
            },
        ))
    }

    /// Copies of the running buffers, for save/restore around perturbed
    /// forward passes.
    pub fn snapshot(&self) -> (Vec<T>, Vec<T>) {
        (
            self.running_mean.borrow().clone(),
            self.running_var.borrow().clone(),
        )
    }

    pub fn restore(&self, snap: (Vec<T>, Vec<T>)) {
        *self.running_mean.borrow_mut() = snap.0;
        *self.running_var.borrow_mut() = snap.1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    #[test]
    fn schedule_starts_at_half_and_caps() {
        let s = BnSchedule::default();
        assert!((s.decay_at(0) - 0.5).abs() < 1e-12);
        assert!(s.decay_at(20) > s.decay_at(0));
        assert!((s.decay_at(100_000) - 0.999).abs() < 1e-12);
    }

    #[test]
    fn training_output_has_zero_mean_unit_variance() {
        let mut rng = crate::tensor::Rng64::seed_from_u64(17);
        let rows = 16;
        let c = 3;
        // Per-channel scale >= 1 keeps the epsilon bias below the tolerance.
        let data: Vec<f64> = (0..rows * c)
            .map(|i| rng.gen_range(-2.0..2.0) * (1.0 + (i % c) as f64))
            .collect();
        let x = Tensor::from_vec(vec![rows, c], data).unwrap();
        let bn = BatchNorm::<f64>::new(c);
        let y = bn.forward(&x, true).unwrap();
        let yd = y.to_vec();
        for j in 0..c {
            let mean: f64 = (0..rows).map(|r| yd[r * c + j]).sum::<f64>() / rows as f64;
            let var: f64 =
                (0..rows).map(|r| (yd[r * c + j] - mean).powi(2)).sum::<f64>() / rows as f64;
            assert!(mean.abs() < 1e-5, "channel {} mean {}", j, mean);
            assert!((var - 1.0).abs() < 1e-5, "channel {} var {}", j, var);
        }
    }

    #[test]
    fn inference_with_fresh_stats_is_near_identity() {
        let data = vec![0.5, -1.25, 2.0, 0.0, 3.5, -0.75];
        let x = Tensor::from_vec(vec![2, 3], data.clone()).unwrap();
        let bn = BatchNorm::<f64>::new(3);
        let y = bn.forward(&x, false).unwrap();
        for (a, e) in y.to_vec().iter().zip(&data) {
            // Identity up to the epsilon inside 1/sqrt(1 + eps).
            assert!((a - e).abs() < 1e-5, "{} vs {}", a, e);
        }
    }

    #[test]
    fn single_row_training_is_config_error() {
        let x = Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let bn = BatchNorm::<f64>::new(3);
        assert!(matches!(
            bn.forward(&x, true),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn running_stats_fold_at_the_configured_decay() {
        let x = Tensor::from_vec(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let bn = BatchNorm::<f64>::new(1);
        bn.set_decay(0.5);
        bn.forward(&x, true).unwrap();
        // batch mean 2, biased var 1; running starts at (0, 1).
        assert!((bn.running_mean.borrow()[0] - 1.0).abs() < 1e-12);
        assert!((bn.running_var.borrow()[0] - 1.0).abs() < 1e-12);
        assert!(bn.running_var.borrow().iter().all(|&v| v >= 0.0));
    }
}
