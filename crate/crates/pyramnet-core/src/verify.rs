//! The registered gradient-check suite: every differentiable op against
//! central finite differences at f64, plus a tiny end-to-end model check.

use rand::SeedableRng;

use crate::data::Task;
use crate::error::Result;
use crate::gem::{covariance_matrix, gem_forward, GemConfig};
use crate::model::{loss, ModelConfig, PyramNet};
use crate::nn::gradcheck::{central_diff, check_loss_fn, check_values, rel_err};
use crate::nn::BatchNorm;
use crate::pan::{pan_collapse, PanBranch, PanModule, PyramidConfig};
use crate::tensor::{backward, ops, NoGradGuard, Rng64, Tensor};

/// Tolerance for single ops.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the end-to-end composite.
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

fn record(out: &mut Vec<OpCheck>, name: &str, max_rel_err: f64, tol: f64) {
    out.push(OpCheck {
        name: name.to_string(),
        max_rel_err,
        tol,
        pass: max_rel_err < tol,
    });
}

/// Scalar projection so every output element influences the loss with a
/// distinct weight.
fn weighted_sum(y: &Tensor<f64>, weights: &[f64]) -> Tensor<f64> {
    let w = Tensor::from_vec(y.shape().to_vec(), weights[..y.len()].to_vec())
        .expect("projection shorter than output");
    ops::sum_all(&ops::mul(y, &w).expect("same shape"))
}

/// Runs the whole per-op suite. `corrupt_relu` injects a deliberate error
/// into the reported relu result so harness failure paths can be exercised.
pub fn run_op_suite(corrupt_relu: bool) -> Vec<OpCheck> {
    let mut out = Vec::new();
    let proj = |seed: u64, len: usize| check_values(len, seed ^ 0xABCD);

    // pointwise_linear: x[5,3] · w[3,7] + b[7]
    {
        let inputs = vec![
            (vec![5, 3], check_values(15, 1)),
            (vec![3, 7], check_values(21, 2)),
            (vec![7], check_values(7, 3)),
        ];
        let pv = proj(10, 35);
        let err = check_loss_fn(&inputs, |t| {
            let y = ops::pointwise_linear(&t[0], &t[1], &t[2]).expect("shapes fixed");
            weighted_sum(&y, &pv)
        });
        record(&mut out, "pointwise_linear", err, OP_TOL);
    }
    {
        let inputs = vec![
            (vec![4, 3], check_values(12, 4)),
            (vec![3, 5], check_values(15, 5)),
        ];
        let pv = proj(11, 20);
        let err = check_loss_fn(&inputs, |t| {
            weighted_sum(&ops::matmul(&t[0], &t[1]).expect("shapes fixed"), &pv)
        });
        record(&mut out, "matmul", err, OP_TOL);
    }
    {
        let inputs = vec![
            (vec![4, 3], check_values(12, 6)),
            (vec![5, 3], check_values(15, 7)),
        ];
        let pv = proj(12, 20);
        let err = check_loss_fn(&inputs, |t| {
            weighted_sum(&ops::matmul_nt(&t[0], &t[1]).expect("shapes fixed"), &pv)
        });
        record(&mut out, "matmul_nt", err, OP_TOL);
    }
    {
        let inputs = vec![
            (vec![3, 4], check_values(12, 8)),
            (vec![3, 4], check_values(12, 9)),
        ];
        let pv = proj(13, 12);
        let err = check_loss_fn(&inputs, |t| {
            let s = ops::add(&t[0], &t[1]).expect("same shape");
            let d = ops::sub(&s, &t[1]).expect("same shape");
            let m = ops::mul(&d, &t[1]).expect("same shape");
            weighted_sum(&ops::scale(&m, 1.7), &pv)
        });
        record(&mut out, "add_sub_mul_scale", err, OP_TOL);
    }
    // relu, inputs pushed off the kink
    {
        let data: Vec<f64> = check_values(24, 10)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        let inputs = vec![(vec![4, 6], data)];
        let pv = proj(14, 24);
        let mut err = check_loss_fn(&inputs, |t| weighted_sum(&ops::relu(&t[0]), &pv));
        if corrupt_relu {
            err += 1.0;
        }
        record(&mut out, "relu", err, OP_TOL);
    }
    {
        let inputs = vec![(vec![2, 5, 3], check_values(30, 11))];
        let pv = proj(15, 6);
        let err = check_loss_fn(&inputs, |t| {
            weighted_sum(&ops::mean_axis(&t[0], 1, true).expect("axis valid"), &pv)
        });
        record(&mut out, "global_avg_pool", err, OP_TOL);
    }
    {
        let inputs = vec![(vec![2, 5, 3], check_values(30, 12))];
        let pv = proj(16, 6);
        let err = check_loss_fn(&inputs, |t| {
            weighted_sum(&ops::max_pool_over_points(&t[0]).expect("rank 3"), &pv)
        });
        record(&mut out, "max_pool_over_points", err, OP_TOL);
    }
    {
        let inputs = vec![
            (vec![3, 4], check_values(12, 13)),
            (vec![3, 2], check_values(6, 14)),
        ];
        let pv = proj(17, 36);
        let err = check_loss_fn(&inputs, |t| {
            let c = ops::concat_last(&[&t[0], &t[1]]).expect("leading dims agree");
            let r = ops::reshape(&c, vec![2, 9]).expect("same numel");
            let s = ops::slice_rows(&r, 0, 2).expect("range valid");
            let rows = ops::concat_rows(&[&s, &r]).expect("tails agree");
            weighted_sum(&rows, &pv)
        });
        record(&mut out, "reshape_concat_slice", err, OP_TOL);
    }
    {
        let inputs = vec![(vec![4, 1], check_values(4, 15))];
        let pv = proj(18, 12);
        let err = check_loss_fn(&inputs, |t| {
            weighted_sum(&ops::broadcast_last(&t[0], 3).expect("unit tail"), &pv)
        });
        record(&mut out, "broadcast_last", err, OP_TOL);
    }
    {
        let indices = vec![1, 2, 0, 3, 3, 1, 2, 0];
        let inputs = vec![(vec![4, 3], check_values(12, 16))];
        let pv = proj(19, 12);
        let err = check_loss_fn(&inputs, move |t| {
            weighted_sum(
                &ops::gather_mean(&t[0], &indices, 2).expect("indices valid"),
                &pv,
            )
        });
        record(&mut out, "gather_mean", err, OP_TOL);
    }
    {
        let inputs = vec![
            (vec![8, 8, 2], check_values(128, 17)),
            (vec![3, 3, 2, 4], check_values(72, 18)),
        ];
        let pv = proj(20, 64);
        let err = check_loss_fn(&inputs, |t| {
            weighted_sum(&ops::conv2d(&t[0], &t[1], (2, 2)).expect("odd kernel"), &pv)
        });
        record(&mut out, "conv2d", err, OP_TOL);
    }
    {
        let inputs = vec![(vec![3, 4, 2], check_values(24, 19))];
        let pv = proj(21, 70);
        let err = check_loss_fn(&inputs, |t| {
            weighted_sum(
                &ops::bilinear_resize(&t[0], (5, 7)).expect("positive target"),
                &pv,
            )
        });
        record(&mut out, "bilinear_resize", err, OP_TOL);
    }
    // dropout: the same seed per evaluation fixes the mask
    {
        let inputs = vec![(vec![6, 4], check_values(24, 20))];
        let pv = proj(22, 24);
        let err = check_loss_fn(&inputs, |t| {
            let mut rng = Rng64::seed_from_u64(99);
            weighted_sum(
                &ops::dropout(&t[0], 0.65, true, &mut rng).expect("keep prob valid"),
                &pv,
            )
        });
        record(&mut out, "dropout", err, OP_TOL);
    }
    {
        let inputs = vec![(vec![5, 4], check_values(20, 21))];
        let labels = vec![0usize, 3, 1, 2, 2];
        let err = check_loss_fn(&inputs, move |t| {
            ops::softmax_cross_entropy(&t[0], &labels).expect("labels valid")
        });
        record(&mut out, "softmax_cross_entropy", err, OP_TOL);
    }
    {
        let inputs = vec![
            (vec![4, 3], check_values(12, 22)),
            (vec![3], check_values(3, 23)),
            (vec![3], check_values(3, 24)),
        ];
        let pv = proj(23, 12);
        let err = check_loss_fn(&inputs, |t| {
            let bn = BatchNorm::from_parts(t[1].clone(), t[2].clone());
            let y = bn.forward(&t[0], true).expect("rows >= 2");
            weighted_sum(&y, &pv)
        });
        record(&mut out, "batch_norm_train", err, OP_TOL);
    }
    {
        let inputs = vec![
            (vec![4, 3], check_values(12, 25)),
            (vec![3], check_values(3, 26)),
            (vec![3], check_values(3, 27)),
        ];
        let pv = proj(24, 12);
        let err = check_loss_fn(&inputs, |t| {
            let bn = BatchNorm::from_parts(t[1].clone(), t[2].clone());
            *bn.running_mean.borrow_mut() = vec![0.25; 3];
            *bn.running_var.borrow_mut() = vec![1.5; 3];
            let y = bn.forward(&t[0], false).expect("shapes fixed");
            weighted_sum(&y, &pv)
        });
        record(&mut out, "batch_norm_eval", err, OP_TOL);
    }
    {
        let inputs = vec![(vec![5, 4], check_values(20, 28))];
        let pv = proj(25, 25);
        let err = check_loss_fn(&inputs, |t| {
            weighted_sum(&covariance_matrix(&t[0]).expect("n >= 2"), &pv)
        });
        record(&mut out, "covariance_matrix", err, OP_TOL);
    }
    {
        let inputs = vec![(vec![5, 4], check_values(20, 29))];
        let pv = proj(26, 40);
        let cfg = GemConfig::default();
        let err = check_loss_fn(&inputs, move |t| {
            weighted_sum(&gem_forward(&t[0], &cfg).expect("n >= 2"), &pv)
        });
        record(&mut out, "gem_forward", err, OP_TOL);
    }
    {
        let inputs = vec![
            (vec![6, 8], check_values(48, 30)),
            (vec![3, 3, 1, 2], check_values(18, 31)),
        ];
        let pv = proj(27, 96);
        let err = check_loss_fn(&inputs, |t| {
            let branch = PanBranch {
                kernel: t[1].clone(),
                bn: BatchNorm::new(2),
                kernel_size: 3,
                stride: 2,
                out_channels: 2,
            };
            let y = branch.forward(&t[0], true).expect("grid valid");
            weighted_sum(&y, &pv)
        });
        record(&mut out, "pan_branch", err, OP_TOL);
    }
    {
        let inputs = vec![(vec![6, 8], check_values(48, 32))];
        let pv = proj(28, 48);
        let err = check_loss_fn(&inputs, |t| {
            let mut rng = Rng64::seed_from_u64(8);
            let config = PyramidConfig {
                branch_kernels: [1, 3, 5, 7],
                branch_strides: [1, 2, 2, 4],
                branch_channels: [2, 2, 2, 2],
            };
            let pan = PanModule::new(config, false, 0.1, &mut rng).expect("config valid");
            let y = pan.forward(&t[0], true).expect("grid valid");
            let c = pan_collapse(&y).expect("rank 3");
            weighted_sum(&c, &pv)
        });
        record(&mut out, "pan_forward_collapse", err, OP_TOL);
    }
    out
}

/// Small but structurally complete model configuration for end-to-end
/// checks: both graph-embedding stages, all four pyramid branches,
/// shortcuts, and the task head, at reduced widths.
pub fn tiny_config(task: Task, n: usize, f: usize, p: usize) -> ModelConfig {
    let mut cfg = ModelConfig::free_form(task, n, f, p);
    cfg.stem_width = 8;
    cfg.mlp_widths = vec![16, 24, 32, 48];
    cfg.head_widths = vec![32, 16];
    cfg.pyramid = PyramidConfig {
        branch_kernels: [1, 3, 5, 7],
        branch_strides: [1, 2, 4, 8],
        branch_channels: [2, 2, 2, 2],
    };
    // Dropout must be inactive for finite differences to see a smooth loss.
    cfg.dropout_keep = 1.0;
    cfg.seed = 42;
    cfg
}

/// Probe step for the end-to-end composite. Smaller than the per-op step so
/// a probe is less likely to push a near-zero pre-activation across the ReLU
/// kink, where the loss is not differentiable.
pub const MODEL_FD_EPS: f64 = 1e-6;

/// Finite-difference check of every parameter of a model against the loss on
/// one fixed batch. Returns the maximum relative error across parameters.
pub fn model_grad_check(cfg: ModelConfig, batch: usize, training: bool, seed: u64) -> Result<f64> {
    let model = PyramNet::<f64>::new(cfg.clone())?;
    // At initialization most pre-activations sit close to zero, right on the
    // ReLU kink; shifting the normalization offsets moves the check to a
    // differentiable neighborhood without changing what is being verified.
    for (name, p) in model.params() {
        if name.ends_with(".bn.beta") {
            for v in p.data_mut().iter_mut() {
                *v += 0.3;
            }
        }
    }
    let n = cfg.n_points;
    let f = cfg.in_channels;
    let p = cfg.num_classes;
    let points = Tensor::from_vec(vec![batch, n, f], check_values(batch * n * f, seed))
        .expect("consistent");
    let label_count = match cfg.task {
        Task::Classification => batch,
        _ => batch * n,
    };
    let labels: Vec<usize> = (0..label_count).map(|i| (i * 7 + 3) % p).collect();

    // The selection indices inside the graph-embedding stages are constants
    // of the forward pass (straight-through); the check verifies exactly
    // that derivative, so perturbed evaluations replay the base selections.
    let _freeze = crate::gem::SelectionFreezeGuard::new();

    // Analytic pass.
    let mut rng = Rng64::seed_from_u64(0);
    let trace = model.forward(&points, training, &mut rng)?;
    let l = loss(trace.logits()?, &labels, cfg.task)?;
    backward(&l)?;
    drop(trace);
    drop(l);

    let mut worst = 0.0f64;
    for (_name, param) in model.params() {
        let analytic = param.grad().unwrap_or_else(|| vec![0.0; param.len()]);
        let base = param.to_vec();
        let numeric = central_diff(
            &base,
            |probe| {
                *param.data_mut() = probe.to_vec();
                let mut rng = Rng64::seed_from_u64(0);
                let value = {
                    let _no_grad = NoGradGuard::new();
                    crate::gem::rewind_frozen_selections();
                    let trace = model.forward(&points, training, &mut rng).expect("forward");
                    loss(trace.logits().expect("logits"), &labels, cfg.task)
                        .expect("loss")
                        .item()
                };
                *param.data_mut() = base.clone();
                value
            },
            MODEL_FD_EPS,
        );
        for (&a, &nv) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(a, nv));
        }
        param.zero_grad();
    }
    Ok(worst)
}
