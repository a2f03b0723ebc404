//! Shared helpers for unit tests: finite-difference gradient verification
//! against the autograd engine.

use crate::tensor::Tensor;

/// Verifies analytic gradients of a scalar-producing closure against central
/// finite differences for every element of every listed parameter.
///
/// The closure must rebuild its graph from the same parameter tensors on each
/// call and be deterministic. Relative error uses a floor on the denominator
/// so near-zero gradients compare absolutely.
pub(crate) fn fd_check(params: &[(String, Tensor)], f: &dyn Fn() -> Tensor) {
    const H: f64 = 1e-6;
    const TOL: f64 = 1e-4;
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = f();
    loss.backward();
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad().clone()).collect();
    for (pi, (name, p)) in params.iter().enumerate() {
        for i in 0..p.len() {
            let original = p.data()[i];
            p.data_mut()[i] = original + H;
            let up = f().item();
            p.data_mut()[i] = original - H;
            let down = f().item();
            p.data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < TOL,
                "gradient mismatch for {name}[{i}]: analytic {a}, numeric {numeric}, rel {rel}"
            );
        }
    }
}
