//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error floor used when both gradients are ~0.
const REL_FLOOR: f64 = 1e-12;

/// Largest relative error between `analytic` and a central-difference
/// estimate of the gradient of `f` at `params`, over every coordinate.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], analytic: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Invalid(format!(
            "{} parameters but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, (p, a)) in params.iter().zip(analytic).enumerate() {
        if p.shape() != a.shape() {
            return Err(Error::ShapeMismatch {
                op: "finite_diff_check",
                left: p.shape().to_vec(),
                right: a.shape().to_vec(),
            });
        }
        for i in 0..p.len() {
            let orig = p.data()[i];
            probe[pi].set(i, orig + eps);
            let plus = f(&probe)?;
            probe[pi].set(i, orig - eps);
            let minus = f(&probe)?;
            probe[pi].set(i, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(a.data()[i], numeric));
        }
    }
    Ok(worst)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks a tape-built scalar function of leaf inputs: gradients come from
/// the tape's backward pass, the reference from finite differences over
/// fresh forward passes.
pub fn check_tape_fn<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let forward = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = forward(inputs)?;
    let grads = tape.backward_leaves(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| {
            grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape(), x.dtype()))
        })
        .collect();
    finite_diff_check(
        |xs| {
            let (tape, _, out) = forward(xs)?;
            tape.value(out).item()
        },
        inputs,
        &analytic,
        eps,
    )
}
