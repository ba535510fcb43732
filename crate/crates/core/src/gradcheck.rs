//! Central finite-difference check of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Maximum relative error between the tape gradient of `f` at `x` and the
/// central difference `(f(x+h·e_i) − f(x−h·e_i)) / 2h`, over every coordinate.
///
/// `f` records a graph on a fresh tape starting from the leaf it is given and
/// returns a one-element loss. The denominator is `max(|analytic|, |numeric|, 1e-8)`.
/// Heaviside nodes contribute their surrogate derivative to the analytic side.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let loss = f(&mut tape, v)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_grad());
    let loss = f(&mut tape, leaf)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
