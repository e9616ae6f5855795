//! Finite-difference verification of analytic gradients.
//!
//! The checker never touches the reverse-mode path: it re-evaluates a
//! scalar-valued forward function at perturbed inputs and forms the
//! central difference `(f(x+h) - f(x-h)) / 2h` per element. Used by the
//! unit tests and the acceptance suite to certify every differentiable
//! operation and the full model.

use crate::tensor::Tensor;

/// Central finite-difference gradients of `f` with respect to each
/// tensor in `inputs`.
///
/// `f` must be a pure function of the inputs (fix seeds inside if it
/// draws randomness).
pub fn finite_diff(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    h: f64,
) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[ti].shape());
        for i in 0..inputs[ti].len() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let up = f(&work);
            work[ti].data_mut()[i] = orig - h;
            let down = f(&work);
            work[ti].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Relative error between an analytic and a numeric gradient element:
/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps finite-difference
/// noise on near-zero gradients from dominating.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Maximum relative error across paired gradient tensors.
pub fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (av, nv) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_err(*av, *nv, floor));
        }
    }
    worst
}

/// Default step for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Default relative-error floor (absolute differences below
/// `1e-4 * floor` always pass).
pub const DEFAULT_FLOOR: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let f = |xs: &[Tensor]| xs[0].data()[0] * xs[0].data()[0];
        let g = finite_diff(&f, &[Tensor::scalar(3.0)], 1e-5);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn multivariate_product() {
        let f = |xs: &[Tensor]| xs[0].data()[0] * xs[1].data()[0];
        let g = finite_diff(&f, &[Tensor::scalar(2.0), Tensor::scalar(5.0)], 1e-5);
        assert!((g[0].data()[0] - 5.0).abs() < 1e-8);
        assert!((g[1].data()[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_floor_absorbs_noise() {
        assert!(rel_err(0.0, 1e-9, 1e-4) < 1e-4);
        assert!(rel_err(1.0, 1.1, 1e-4) > 0.05);
    }
}
