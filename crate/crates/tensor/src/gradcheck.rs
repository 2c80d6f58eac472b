use crate::{Result, Tape, Tensor, TensorError, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar function against central
/// differences at `point`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`. The
/// function receives the input as a differentiable leaf and may bind any
/// other values it needs onto the same tape via [`Var::tape`].
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.param(point);
        let y = f(x)?;
        if !y.item().is_finite() {
            return Err(TensorError::NonFinite(format!("f(point) = {}", y.item())));
        }
        tape.backward(y)?.tensor(x)
    };

    let eval = |p: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let y = f(tape.constant(p.clone()))?.item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(TensorError::NonFinite(format!("f at perturbed point = {y}")))
        }
    };

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
