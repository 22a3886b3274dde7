mod oracles;

use hma_core::autodiff::{grad_check, grad_check_at};
use oracles::grad_cases::{model_objective, model_param_grad_error, primitive_cases, toy_model_f64};

const TOL: f64 = 1e-4;

#[test]
fn every_operation_matches_central_differences() {
    for (name, f, x) in primitive_cases() {
        let e = grad_check(f, &x, 1e-5).unwrap();
        assert!(e < TOL, "{name}: relative error {e:e}");
    }
}

#[test]
fn toy_network_input_gradient() {
    let (model, x) = toy_model_f64(3);
    // every third pixel of every channel keeps this test quick; the
    // acceptance run checks all of them
    let coords: Vec<usize> = (0..x.numel()).step_by(3).collect();
    let e = grad_check_at(|t, v| model_objective(&model, t, v), &x, 1e-5, &coords).unwrap();
    assert!(e < TOL, "relative error {e:e}");
}

#[test]
fn toy_network_parameter_gradients() {
    let (model, x) = toy_model_f64(4);
    let (e, at) = model_param_grad_error(&model, &x, 1, 1e-5).unwrap();
    assert!(e < TOL, "relative error {e:e} at {at}");
}
