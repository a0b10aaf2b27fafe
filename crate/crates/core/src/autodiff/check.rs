use super::{AutodiffError, Result, Tape, Tensor, Var};

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of a scalar function, over all coordinates of `x`.
///
/// Per coordinate the error is `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(AutodiffError::InvalidArgument(format!("step {h} outside (0, 1e-2]")));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let out = f(&tape, tape.constant(point.clone()))?;
        let v = out.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFinite(format!("f(x) = {v}")))
        }
    };

    let tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&tape, input)?;
    if !out.item().is_finite() {
        return Err(AutodiffError::NonFinite(format!("f(x) = {}", out.item())));
    }
    let analytic = tape.backward(out)?.wrt_or_zero(input);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
