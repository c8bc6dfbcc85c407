use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Largest disagreement between reverse-mode and central-difference gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares the gradient of scalar `f` at `x` with `(f(x+ε) − f(x−ε)) / 2ε`.
///
/// `coords` restricts the check to a subset of flat indices; `None` checks all.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, coords: Option<&[usize]>) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let base: Vec<f64> = x.values().to_vec();
    let leaf = Tensor::param(x.shape(), base.clone())?;
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::NonScalarBackward(y.shape().to_vec()));
    }
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };
    let eval = |v: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(x.shape(), v)?;
        Ok(no_grad(|| f(&t))?.item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: coords.len(),
    };
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_index = i;
        }
    }
    Ok(report)
}
