//! Leaky integrate-and-fire neurons with an arctan surrogate gradient.
//!
//! One step, for input current `x`, previous potential `v`:
//!
//! ```text
//! H = v + (x − (v − v_reset)) / τ
//! S = G(H − v_th)                 G(u) = 1 if u ≥ 0 else 0
//! v' = H·(1 − S) + v_reset·S
//! ```
//!
//! Backpropagation replaces `G'` by `σ'(u) = α / (2·(1 + (π/2·α·u)²))` and
//! treats the reset multiply as detached: `∂v'/∂H = 1 − S`.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub surrogate_width: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
            surrogate_width: 2.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0) {
            return Err(Error::Config(format!("tau must be >= 1, got {}", self.tau)));
        }
        if !(self.v_th > self.v_reset) {
            return Err(Error::Config(format!(
                "v_th ({}) must exceed v_reset ({})",
                self.v_th, self.v_reset
            )));
        }
        if !(self.surrogate_width > 0.0) {
            return Err(Error::Config("surrogate width must be positive".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn heaviside(u: f64) -> f64 {
    if u >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Arctan surrogate derivative `σ'(u)`.
#[inline]
pub fn surrogate_grad(u: f64, alpha: f64) -> f64 {
    let z = FRAC_PI_2 * alpha * u;
    alpha / (2.0 * (1.0 + z * z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub v: Tensor,
}

impl LifState {
    pub fn resting(shape: &[usize], p: &LifParams) -> Self {
        LifState {
            v: Tensor::full(shape, p.v_reset),
        }
    }
}

/// One neuron update; returns the spikes and the next state.
pub fn lif_step(x: &Tensor, state: &LifState, p: &LifParams) -> Result<(Tensor, LifState)> {
    if x.shape() != state.v.shape() {
        return Err(Error::dim(format!(
            "input {:?} does not match state {:?}",
            x.shape(),
            state.v.shape()
        )));
    }
    let mut s = Vec::with_capacity(x.len());
    let mut v = Vec::with_capacity(x.len());
    for (&xi, &vi) in x.data().iter().zip(state.v.data()) {
        let h = charge(vi, xi, p);
        let spike = heaviside(h - p.v_th);
        s.push(spike);
        v.push(h * (1.0 - spike) + p.v_reset * spike);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), s),
        LifState {
            v: Tensor::from_parts(x.shape().to_vec(), v),
        },
    ))
}

#[inline]
fn charge(v: f64, x: f64, p: &LifParams) -> f64 {
    v + (x - (v - p.v_reset)) / p.tau
}

/// Binary spikes with a leading time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    spikes: Tensor,
    rate: f64,
}

impl SpikeTrain {
    pub fn new(spikes: Tensor) -> Result<Self> {
        if spikes.rank() == 0 || spikes.shape()[0] == 0 {
            return Err(Error::EmptyInput("spike train needs a time axis".into()));
        }
        if !spikes.is_binary() {
            return Err(Error::contract("spike train values must be 0 or 1"));
        }
        let rate = spikes.mean();
        Ok(SpikeTrain { spikes, rate })
    }

    pub fn spikes(&self) -> &Tensor {
        &self.spikes
    }

    pub fn into_tensor(self) -> Tensor {
        self.spikes
    }

    pub fn time_steps(&self) -> usize {
        self.spikes.shape()[0]
    }

    /// Cached mean firing rate.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn recompute_rate(&self) -> f64 {
        self.spikes.mean()
    }
}

/// Forward pass over `[T, …]`; returns spikes and pre-threshold potentials `H`.
pub(crate) fn lif_forward(x: &[f64], steps: usize, p: &LifParams) -> (Vec<f64>, Vec<f64>) {
    let width = x.len() / steps;
    let mut v = vec![p.v_reset; width];
    let mut spikes = vec![0.0; x.len()];
    let mut charged = vec![0.0; x.len()];
    for t in 0..steps {
        let off = t * width;
        for i in 0..width {
            let h = charge(v[i], x[off + i], p);
            let s = heaviside(h - p.v_th);
            charged[off + i] = h;
            spikes[off + i] = s;
            v[i] = h * (1.0 - s) + p.v_reset * s;
        }
    }
    (spikes, charged)
}

/// BPTT through [`lif_forward`] given the upstream spike gradient.
pub(crate) fn lif_backward(
    grad_spikes: &[f64],
    spikes: &[f64],
    charged: &[f64],
    steps: usize,
    p: &LifParams,
) -> Vec<f64> {
    let width = grad_spikes.len() / steps;
    let mut gx = vec![0.0; grad_spikes.len()];
    let mut gv = vec![0.0; width];
    let leak = 1.0 - 1.0 / p.tau;
    for t in (0..steps).rev() {
        let off = t * width;
        for i in 0..width {
            let k = off + i;
            let gh = grad_spikes[k] * surrogate_grad(charged[k] - p.v_th, p.surrogate_width)
                + gv[i] * (1.0 - spikes[k]);
            gx[k] = gh / p.tau;
            gv[i] = gh * leak;
        }
    }
    gx
}

/// Runs a LIF layer over the leading time axis, starting from rest.
pub fn lif_run(x: &Tensor, p: &LifParams) -> Result<SpikeTrain> {
    if x.rank() == 0 || x.shape()[0] == 0 {
        return Err(Error::EmptyInput("lif_run needs T >= 1".into()));
    }
    let (spikes, _) = lif_forward(x.data(), x.shape()[0], p);
    SpikeTrain::new(Tensor::from_parts(x.shape().to_vec(), spikes))
}

/// Recorded LIF layer; gradients flow through time via the surrogate.
pub fn lif_run_tape(tape: &mut Tape, x: Var, p: &LifParams) -> Result<Var> {
    tape.lif(x, *p)
}

/// Heaviside forward with the surrogate derivative on the backward pass.
pub fn surrogate_spike(tape: &mut Tape, v: Var, alpha: f64) -> Var {
    tape.spike(v, alpha)
}
