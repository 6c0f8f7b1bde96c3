//! Finite-difference verification of every registered differentiable op and
//! of the end-to-end model at reduced widths.

use pyramnet_core::data::Task;
use pyramnet_core::verify::{model_grad_check, run_op_suite, tiny_config, MODEL_TOL, OP_TOL};

#[test]
fn every_registered_op_matches_finite_differences() {
    let checks = run_op_suite(false);
    assert!(checks.len() >= 18, "suite lost registered ops");
    for c in &checks {
        assert!(
            c.pass,
            "{} failed: max rel err {} (tol {})",
            c.name, c.max_rel_err, c.tol
        );
        assert!(c.max_rel_err < OP_TOL, "{}: {}", c.name, c.max_rel_err);
    }
}

#[test]
fn corrupted_relu_backward_is_reported_by_name() {
    let checks = run_op_suite(true);
    let relu = checks.iter().find(|c| c.name == "relu").expect("relu row");
    assert!(!relu.pass);
    assert!(checks.iter().filter(|c| !c.pass).count() == 1);
}

#[test]
fn classification_model_gradients_match_finite_differences() {
    // Inference-mode composite at B=1 (head batch statistics need B >= 2).
    let err = model_grad_check(tiny_config(Task::Classification, 8, 3, 3), 1, false, 31)
        .expect("model builds");
    assert!(err < MODEL_TOL, "max rel err {}", err);
}

#[test]
fn classification_model_gradients_match_in_training_mode() {
    // Training-mode batch statistics, two clouds of 16 points.
    let err = model_grad_check(tiny_config(Task::Classification, 16, 3, 3), 2, true, 32)
        .expect("model builds");
    assert!(err < MODEL_TOL, "max rel err {}", err);
}

#[test]
fn segmentation_model_gradients_match_finite_differences() {
    let err = model_grad_check(tiny_config(Task::PartSeg, 8, 3, 2), 1, false, 33)
        .expect("model builds");
    assert!(err < MODEL_TOL, "max rel err {}", err);
}
