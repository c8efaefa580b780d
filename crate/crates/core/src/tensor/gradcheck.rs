//! Central finite-difference audit of backward passes.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of one finite-difference audit.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max_rel_error={:.3e} worst_index={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.op_name,
            self.max_rel_error,
            self.worst_index
        )
    }
}

/// Compare the backward pass of a scalar-valued `f` against central finite
/// differences at `x0`, coordinate by coordinate. Relative error uses a
/// `max(|a|, |b|, 1e-8)` denominator.
pub fn grad_check<S: Scalar>(
    op_name: &str,
    f: impl Fn(&Tensor<S>) -> Result<Tensor<S>>,
    x0: &Tensor<S>,
    eps: f64,
    tol: f64,
) -> Result<GradReport> {
    let x = x0.requiring_grad();
    let loss = f(&x)?;
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![S::zero(); x.numel()]);

    let base = x0.to_vec();
    let eval = |data: Vec<S>| -> Result<f64> {
        let probe = Tensor::from_vec(x0.shape(), data)?;
        Ok(f(&probe)?.item().as_f64())
    };

    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += S::from_f64(eps);
        let mut minus = base.clone();
        minus[i] -= S::from_f64(eps);
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let an = analytic[i].as_f64();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        worst_index: worst,
        passed: max_rel <= tol,
    })
}
