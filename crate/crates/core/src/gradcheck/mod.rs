//! Central finite-difference gradient checks in 64-bit precision.

pub mod suite;

pub use suite::{run_suite, SuiteEntry};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `||g_analytic - g_numeric|| / (||g_analytic|| + ||g_numeric||)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
    pub passed: bool,
}

/// Gradient norms below this are treated as exactly zero.
pub const ZERO_GRAD_FLOOR: f64 = 1e-10;

/// Compares the tape gradient of a scalar function against central finite
/// differences. `f` receives a fresh tape and the input variable and must
/// return a scalar node.
pub fn grad_check<G>(f: G, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::InvalidArgument("grad_check: function is not scalar".into()));
        }
        Ok(value.item())
    };

    let mut numeric = vec![0.0; x.numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * step);
    }

    let mut diff_sq = 0.0;
    let mut a_sq = 0.0;
    let mut n_sq = 0.0;
    let mut max_abs: f64 = 0.0;
    for (&a, &n) in analytic.data().iter().zip(&numeric) {
        diff_sq += (a - n) * (a - n);
        a_sq += a * a;
        n_sq += n * n;
        max_abs = max_abs.max((a - n).abs());
    }
    let denom = a_sq.sqrt() + n_sq.sqrt();
    // both gradients at rounding level: the input is genuinely unused
    let rel_error = if denom < ZERO_GRAD_FLOOR { 0.0 } else { diff_sq.sqrt() / denom };
    Ok(GradCheckReport {
        rel_error,
        max_abs_error: max_abs,
        n_checked: numeric.len(),
        passed: rel_error < tol,
    })
}
