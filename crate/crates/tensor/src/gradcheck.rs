use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `x` with step `h`.
///
/// `f` must be deterministic: it is evaluated twice at `x` and any
/// difference is reported as a contract error.
pub fn central_difference_error(
    analytic: &[f64],
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    if h.is_nan() || h <= 0.0 {
        return Err(TensorError::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != x.len() {
        return Err(TensorError::shape("central_difference_error", &[analytic.len()], &[x.len()]));
    }
    let first = f(x)?;
    let second = f(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::Contract(
            "function is not deterministic; freeze its noise before checking gradients".into(),
        ));
    }
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Checks the tape gradient of a scalar function of one tensor.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// scalar. Returns the maximum relative error over coordinates.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let (rows, cols) = x.dims2()?;
    let analytic = {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.detached(), true);
        let out = f(&mut tape, leaf)?;
        let grads = tape.backward(out)?;
        grads.get(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()])
    };
    central_difference_error(&analytic, x.data(), h, |values| {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::matrix(rows, cols, values.to_vec()), false);
        let out = f(&mut tape, leaf)?;
        if tape.value(out).numel() != 1 {
            return Err(TensorError::Contract("gradient check needs a scalar function".into()));
        }
        Ok(tape.scalar(out))
    })
}
