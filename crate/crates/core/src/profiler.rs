//! Synaptic-operation accounting and the 45 nm energy model.
//!
//! ```text
//! SOPs(l) = rate(l) · T · FLOPs(l)
//! E = E_MAC · FLOPs(first conv) + E_AC · Σ_l SOPs(l)      static input
//! E = E_AC  · Σ_l SOPs(l)                                 event input
//! ```
//!
//! FLOPs are per sample and per time step; a multiply-accumulate counts as 2.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Energy of one multiply-accumulate, in picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy of one accumulate, in picojoules.
pub const E_AC_PJ: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    ConvFirst,
    Conv,
    Fc,
    Mixer,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::ConvFirst => "conv_first",
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::Mixer => "mixer",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv_first" => Ok(LayerKind::ConvFirst),
            "conv" => Ok(LayerKind::Conv),
            "fc" => Ok(LayerKind::Fc),
            "mixer" => Ok(LayerKind::Mixer),
            other => Err(Error::Config(format!("unknown layer kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub name: String,
    pub kind: LayerKind,
    /// FLOPs per sample per time step.
    pub flops: u64,
    /// Mean input firing rate.
    pub rate: f64,
    pub time_steps: usize,
}

/// FLOPs of a `k×k` convolution producing an `out_h × out_w` map.
pub fn conv_flops(in_ch: usize, out_ch: usize, kernel: usize, out_h: usize, out_w: usize) -> u64 {
    2 * (out_ch * in_ch * kernel * kernel * out_h * out_w) as u64
}

/// FLOPs of a dense layer applied to `rows` input vectors.
pub fn fc_flops(inputs: usize, outputs: usize, rows: usize) -> u64 {
    2 * (inputs * outputs * rows) as u64
}

/// Fraction of non-zero entries; for binary spikes this is the firing rate.
pub fn firing_rate(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v != 0.0).count() as f64 / values.len() as f64
}

pub fn sops(trace: &LayerTrace) -> Result<f64> {
    if !(0.0..=1.0).contains(&trace.rate) {
        return Err(Error::contract(format!(
            "layer {} has firing rate {} outside [0, 1]",
            trace.name, trace.rate
        )));
    }
    Ok(trace.rate * trace.time_steps as f64 * trace.flops as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEnergy {
    pub name: String,
    pub kind: LayerKind,
    pub flops: u64,
    pub rate: f64,
    /// Operations charged for this layer: MACs-as-FLOPs for a float first
    /// layer, otherwise SOPs.
    pub sops: f64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub total_ops: f64,
    pub total_energy_pj: f64,
}

impl EnergyReport {
    pub fn total_ops_g(&self) -> f64 {
        self.total_ops / 1e9
    }

    pub fn total_energy_mj(&self) -> f64 {
        self.total_energy_pj / 1e9
    }

    pub fn layer(&self, name: &str) -> Option<&LayerEnergy> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// One `key=value` block per layer, then a totals footer.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            let _ = writeln!(
                out,
                "[layer]\nname={}\nkind={}\nflops={}\nrate={}\nsops={}\nenergy_pj={}\n",
                l.name,
                l.kind,
                l.flops,
                fmt_sig(l.rate),
                fmt_sig(l.sops),
                fmt_sig(l.energy_pj)
            );
        }
        let _ = writeln!(
            out,
            "[total]\nops_g={}\nenergy_mj={}",
            fmt_sig(self.total_ops_g()),
            fmt_sig(self.total_energy_mj())
        );
        out
    }
}

/// Formats with nine significant digits.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let digits = 9 - 1 - v.abs().log10().floor() as i32;
    if (0..=17).contains(&digits) {
        let s = format!("{v:.*}", digits as usize);
        let parsed: f64 = s.parse().unwrap_or(v);
        format!("{parsed}")
    } else {
        format!("{v:.8e}")
    }
}

/// Aggregates traces into an energy report.
///
/// With `first_layer_is_float` the first trace is charged as dense MACs at
/// [`E_MAC_PJ`] per FLOP regardless of its rate; every other layer is charged
/// [`E_AC_PJ`] per SOP.
pub fn total_energy(traces: &[LayerTrace], first_layer_is_float: bool) -> Result<EnergyReport> {
    if traces.is_empty() {
        return Err(Error::contract("energy report needs at least one layer trace"));
    }
    let mut layers = Vec::with_capacity(traces.len());
    for (i, t) in traces.iter().enumerate() {
        let counted = sops(t)?;
        let (ops, energy) = if i == 0 && first_layer_is_float {
            let f = t.flops as f64;
            (f, E_MAC_PJ * f)
        } else {
            (counted, E_AC_PJ * counted)
        };
        layers.push(LayerEnergy {
            name: t.name.clone(),
            kind: t.kind,
            flops: t.flops,
            rate: t.rate,
            sops: ops,
            energy_pj: energy,
        });
    }
    let total_ops = layers.iter().map(|l| l.sops).sum();
    let total_energy_pj = layers.iter().map(|l| l.energy_pj).sum();
    Ok(EnergyReport {
        layers,
        total_ops,
        total_energy_pj,
    })
}

/// Element-wise mean of several trace lists recorded on the same model.
pub fn average_traces(runs: &[Vec<LayerTrace>]) -> Result<Vec<LayerTrace>> {
    let first = runs.first().ok_or_else(|| Error::EmptyInput("no traces to average".into()))?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::contract("trace lists differ in length"));
    }
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, t)| LayerTrace {
            rate: runs.iter().map(|r| r[i].rate).sum::<f64>() / runs.len() as f64,
            ..t.clone()
        })
        .collect())
}
