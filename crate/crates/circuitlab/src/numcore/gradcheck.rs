//! Central-difference verification of the backward pass.

use super::tape::{Tape, ValueId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-coordinate comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Relative error per coordinate, floored at [`GradCheckReport::DENOM_FLOOR`].
    pub per_coordinate: Vec<f64>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    /// Denominator floor for the relative error. Central differences carry
    /// absolute noise around `|f| * eps / step`, so coordinates below this
    /// magnitude are compared absolutely instead of relatively.
    pub const DENOM_FLOOR: f64 = 1e-2;
}

/// Compare the tape gradient of `function` at `point` against central finite
/// differences with the given step.
///
/// `function` must deterministically map a tape value to a scalar tape value
/// using differentiable primitives only.
pub fn grad_check<F>(function: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }

    // Analytic gradient.
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let out = function(&mut tape, x)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::InvalidArgument(
            "grad_check function must produce a scalar".into(),
        ));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.dense(x).data().to_vec();

    // Central differences, one coordinate at a time.
    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(point.shape().to_vec(), data.to_vec())?);
        let out = function(&mut tape, x)?;
        tape.value(out).scalar_value()
    };

    let base = point.data();
    let mut numeric = Vec::with_capacity(base.len());
    let mut perturbed = base.to_vec();
    for i in 0..base.len() {
        perturbed[i] = base[i] + step;
        let plus = eval(&perturbed)?;
        perturbed[i] = base[i] - step;
        let minus = eval(&perturbed)?;
        perturbed[i] = base[i];
        numeric.push((plus - minus) / (2.0 * step));
    }

    let per_coordinate: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(GradCheckReport::DENOM_FLOOR);
            (a - n).abs() / denom
        })
        .collect();
    let max_rel_err = per_coordinate.iter().cloned().fold(0.0, f64::max);

    Ok(GradCheckReport { analytic, numeric, per_coordinate, max_rel_err })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact_to_rounding() {
        // f(x) = sum_i (i+1) * x_i^2, gradient 2(i+1)x_i. Central differences
        // are exact on quadratics up to rounding.
        let point = Tensor::from_vec(vec![1, 4], vec![0.5, -1.2, 2.0, 0.3]).unwrap();
        let report = grad_check(
            |tape, x| {
                let sq = tape.multiply(x, x)?;
                let w = Tensor::from_vec(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
                tape.weighted_sum(sq, &w)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gelu_grid_including_zero() {
        let point =
            Tensor::from_vec(vec![1, 7], vec![-3.0, -1.0, -0.1, 0.0, 0.1, 1.0, 3.0]).unwrap();
        let report = grad_check(
            |tape, x| {
                let g = tape.gelu(x)?;
                let w = Tensor::from_vec(vec![1, 7], vec![1.0; 7]).unwrap();
                tape.weighted_sum(g, &w)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn layer_norm_random_vector() {
        let point = Tensor::from_vec(
            vec![1, 8],
            vec![0.31, -1.4, 0.77, 2.1, -0.05, 0.6, -2.3, 1.15],
        )
        .unwrap();
        let report = grad_check(
            |tape, x| {
                let y = tape.layer_norm(x)?;
                // weight rows unevenly so the gradient is not symmetric
                let w = Tensor::from_vec(
                    vec![1, 8],
                    vec![0.9, -0.3, 0.4, 1.1, -0.8, 0.2, 0.5, -1.0],
                )
                .unwrap();
                tape.weighted_sum(y, &w)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let point = Tensor::scalar(1.0);
        assert!(grad_check(|tape, x| tape.multiply(x, x), &point, 0.0).is_err());
    }
}
