//! Central-difference verification of backward passes.
//!
//! Runs in double precision: the forward closure is evaluated with each
//! input element nudged by ±step and the quotient is compared against the
//! gradient produced by [`backward`]. The finite-difference side never
//! consults backward code, so it is an independent oracle for every op's
//! adjoint.

use crate::error::Result;
use crate::tensor::{backward, no_grad, Tensor};

pub struct CheckReport {
    /// Worst relative error across all checked elements.
    pub max_rel_err: f64,
    /// Total number of input elements compared.
    pub checked: usize,
    /// Elements excluded because a kink (e.g. a relu pre-activation
    /// closer to zero than `step`) sits inside the difference stencil,
    /// where no finite difference measures the derivative.
    pub skipped: usize,
}

/// Compare analytic gradients of `forward()` against central finite
/// differences for every element of every tensor in `inputs`.
///
/// `forward` must rebuild its graph from the given input tensors on each
/// call and return a scalar loss. Relative error uses the larger of the
/// two magnitudes as denominator, floored at 1e-6 so near-zero pairs
/// compare absolutely.
///
/// Mismatched elements are kept only when the function is smooth across
/// the stencil. A kink inside it contributes second-difference curvature
/// `|f(x+h) - 2f(x) + f(x-h)| / 2h` of the same size as the mismatch it
/// causes, so such elements are skipped; a wrong backward pass leaves the
/// curvature at smooth scale and is still flagged.
pub fn check_gradients<F>(inputs: &[&Tensor<f64>], mut forward: F, step: f64) -> Result<CheckReport>
where
    F: FnMut() -> Tensor<f64>,
{
    for t in inputs {
        t.set_requires_grad(true);
        t.clear_grad();
    }
    let loss = forward();
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> =
        inputs.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    for t in inputs {
        t.clear_grad();
    }
    let base = no_grad(&mut forward).item();

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (ti, t) in inputs.iter().enumerate() {
        for idx in 0..t.numel() {
            let orig = t.get(idx);
            t.set(idx, orig + step);
            let lp = no_grad(&mut forward).item();
            t.set(idx, orig - step);
            let lm = no_grad(&mut forward).item();
            t.set(idx, orig);
            let fd = (lp - lm) / (2.0 * step);
            let a = analytic[ti][idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > 1e-5 {
                let curvature = (lp - 2.0 * base + lm).abs() / (2.0 * step);
                if curvature > 0.5 * (a - fd).abs() {
                    skipped += 1;
                    continue;
                }
            }
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    Ok(CheckReport { max_rel_err, checked, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn accepts_a_correct_gradient() {
        // loss = sum(3x + x) has gradient 4 everywhere.
        let x = Tensor::new(&[3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let report = check_gradients(
            &[&x],
            || {
                let y = ops::add(&ops::scale(&x, 3.0), &x).unwrap();
                ops::weighted_sum(&y, &[1.0, 1.0, 1.0]).unwrap()
            },
            1e-4,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_err < 1e-10, "{}", report.max_rel_err);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        // Deliberately mismatched forward/backward: the loss reads 2x but we
        // route the graph through scale(x, 3), so the analytic grad is 3.
        let x = Tensor::new(&[1], vec![1.0f64]).unwrap();
        let report = check_gradients(
            &[&x],
            || {
                let wrong = ops::scale(&x, 3.0);
                // Make the *value* disagree with the recorded op.
                wrong.set(0, 2.0 * x.get(0));
                ops::weighted_sum(&wrong, &[1.0]).unwrap()
            },
            1e-4,
        )
        .unwrap();
        // The loss is linear, so the mismatch cannot be blamed on a kink.
        assert_eq!(report.checked, 1);
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_err > 0.1, "{}", report.max_rel_err);
    }

    #[test]
    fn skips_elements_whose_stencil_straddles_a_kink() {
        // relu pre-activations at and near zero: the central difference
        // lands between the one-sided slopes no matter the step, while any
        // subgradient is defensible analytically. The curvature test must
        // catch both, and leave the far-from-zero element checked.
        for pivot in [0.0f64, 3e-5] {
            let x = Tensor::new(&[2], vec![pivot, 1.0]).unwrap();
            let report = check_gradients(
                &[&x],
                || ops::weighted_sum(&ops::relu(&x), &[1.0, 1.0]).unwrap(),
                1e-4,
            )
            .unwrap();
            assert_eq!(report.skipped, 1, "pivot {pivot}");
            assert_eq!(report.checked, 1, "pivot {pivot}");
            assert!(report.max_rel_err < 1e-10, "{}", report.max_rel_err);
        }
    }
}
