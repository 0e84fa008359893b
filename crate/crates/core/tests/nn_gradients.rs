//! Finite-difference checks for every differentiable op.

mod support;

use support::grad_suite::{self, OpCheck};

const INSTANCES: u64 = 100;

fn assert_all(run: fn(&mut Vec<OpCheck>, u64)) {
    let mut out = Vec::new();
    run(&mut out, INSTANCES);
    for c in &out {
        assert!(
            c.passed(),
            "{}: worst relative error {:e} (tol {:e})",
            c.name,
            c.worst,
            c.tol
        );
    }
}

#[test]
fn linear_grad() {
    assert_all(grad_suite::linear_grad);
}

#[test]
fn conv2d_grad() {
    assert_all(grad_suite::conv2d_grad);
}

#[test]
fn activation_grads() {
    assert_all(grad_suite::activation_grads);
}

#[test]
fn dropout_grad_with_fixed_mask() {
    assert_all(grad_suite::dropout_grad_with_fixed_mask);
}

#[test]
fn layer_norm_grad() {
    assert_all(grad_suite::layer_norm_grad);
}

#[test]
fn binary_elementwise_grads() {
    assert_all(grad_suite::binary_elementwise_grads);
}

#[test]
fn matmul_grads() {
    assert_all(grad_suite::matmul_grads);
}

#[test]
fn matrix_structure_grads() {
    assert_all(grad_suite::matrix_structure_grads);
}

#[test]
fn solve_spd_grad() {
    assert_all(grad_suite::solve_spd_grad);
}

#[test]
fn shape_op_grads() {
    assert_all(grad_suite::shape_op_grads);
}

#[test]
fn reduction_grads() {
    assert_all(grad_suite::reduction_grads);
}

#[test]
fn lstm_unrolled_five_steps() {
    assert_all(grad_suite::lstm_unrolled_five_steps);
}
