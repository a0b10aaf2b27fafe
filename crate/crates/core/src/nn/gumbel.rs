//! Two-class Gumbel-Softmax on a confidence score with a straight-through hard sample.

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Confidence scores are clamped to `[GUMBEL_CLAMP, 1 - GUMBEL_CLAMP]` before taking logs.
pub const GUMBEL_CLAMP: f64 = 1e-6;

pub struct GumbelSample<'t> {
    /// Exactly 0 or 1 forward; gradient flows to the relaxed sample.
    pub pi: Var<'t>,
    /// The relaxed class-1 probability.
    pub soft: f64,
}

fn standard_gumbel(rng: &mut impl Rng) -> f64 {
    // Open interval keeps both logs finite.
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Sample a binary decision from a scalar confidence `theta` in [0, 1].
///
/// Logits are `(log theta, log(1 - theta))`; the relaxed sample is the
/// class-1 entry of `softmax((logits + g) / temperature)`.
pub fn gumbel_binary<'t>(theta: &Var<'t>, temperature: f64, rng: &mut impl Rng) -> Result<GumbelSample<'t>> {
    let t = theta.item();
    if !t.is_finite() || !(0.0..=1.0).contains(&t) || theta.value().len() != 1 {
        return Err(Error::Invalid(format!("confidence {t} is not a scalar in [0, 1]")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("temperature {temperature} must be positive")));
    }
    let th = theta.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    let l1 = th.log();
    let l0 = th.neg().add_scalar(1.0).log();
    let g1 = standard_gumbel(rng);
    let g0 = standard_gumbel(rng);
    // softmax over two classes == sigmoid of the scaled difference.
    let diff = l1.sub(&l0)?.add_scalar(g1 - g0).scale(1.0 / temperature);
    let soft = diff.sigmoid();
    let hard = if diff.item() > 0.0 { 1.0 } else { 0.0 };
    let shape = soft.shape();
    let pi = soft.straight_through(Tensor::filled(&shape, hard))?;
    Ok(GumbelSample { pi, soft: soft.item() })
}
