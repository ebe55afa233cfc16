//! Central finite-difference gradient checking.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compares the autodiff gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate, and returns the maximum of
/// `|ad - fd| / max(1, |fd|)`.
///
/// `f` must build its computation on the tape it is handed; the
/// finite-difference side runs it on non-recording tapes.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidHyperparam("grad_check eps must be > 0".into()));
    }
    let base = x.to_vec();
    let shape = x.shape().to_vec();

    let var = Tensor::new(shape.clone(), base.clone(), true)?;
    let tape = Tape::new();
    let out = f(&tape, &var)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    let ad = if out.requires_grad() {
        tape.backward(&out)?;
        var.grad().unwrap_or_else(|| vec![0.0; base.len()])
    } else {
        // output does not depend on x at all
        vec![0.0; base.len()]
    };

    let eval = |coord: usize, v: f64| -> Result<f64> {
        let mut vals = base.clone();
        vals[coord] = v;
        let probe = Tensor::new(shape.clone(), vals, false)?;
        let tape = Tape::no_grad();
        Ok(f(&tape, &probe)?.item())
    };

    let mut max_err = 0.0f64;
    for i in 0..base.len() {
        let fp = eval(i, base[i] + eps)?;
        let fm = eval(i, base[i] - eps)?;
        let fd = (fp - fm) / (2.0 * eps);
        let err = (ad[i] - fd).abs() / fd.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
