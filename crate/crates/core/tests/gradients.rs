//! Finite-difference checks of the hand-derived backward pass.

mod common;

use common::fd::{check, check_op};
use ctrlx::denoiser::{DenoiserConfig, DenoiserModel};

#[test]
fn micro_config_has_a_few_hundred_weights_per_layer_type() {
    let model = DenoiserModel::new(DenoiserConfig::micro(), 0).unwrap();
    assert!(model.params().len() < 20_000);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let report = check(DenoiserConfig::micro(), 7, 24);
    let mut worst = 0.0f64;
    for (name, rel, n) in &report {
        println!("{name:32} rel {rel:.2e} over {n} coords");
        worst = worst.max(*rel);
    }
    assert!(worst < 1e-3, "worst relative gradient error {worst:.3e}");
}

#[test]
fn elementwise_and_resampling_ops_match_finite_differences() {
    use ctrlx::nn::ops::{avg_pool2, avg_pool2_backward, silu, silu_backward, upsample2, upsample2_backward};
    let silu_err = check_op(silu, silu_backward, 40, 40);
    assert!(silu_err < 1e-3, "silu {silu_err:.2e}");
    let pool_err = check_op(|x| avg_pool2(x, 2, 4, 4), |_, dy| avg_pool2_backward(dy, 2, 4, 4), 32, 8);
    assert!(pool_err < 1e-3, "avg_pool2 {pool_err:.2e}");
    let up_err = check_op(|x| upsample2(x, 2, 2, 3), |_, dy| upsample2_backward(dy, 2, 2, 3), 12, 48);
    assert!(up_err < 1e-3, "upsample2 {up_err:.2e}");
}
