//! Named parameter storage and a forward-pass context over the tape.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::profiler::{firing_rate, LayerKind, LayerTrace};
use crate::spiking::LifParams;
use crate::tape::{BatchStats, BnMode, Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Trainable parameters and non-trainable buffers, keyed by dotted names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn num_trainable_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Kaiming-uniform weight with bound `√(6 / fan_in)`.
    pub fn init_weight<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let bound = (6.0 / fan_in as f64).sqrt();
        self.insert_param(name, Tensor::uniform(shape, -bound, bound, rng));
    }

    /// Batch-norm running statistics, plus `gamma = 1`, `beta = 0` when affine.
    pub fn init_batch_norm(&mut self, name: &str, channels: usize, affine: bool) {
        if affine {
            self.insert_param(format!("{name}.gamma"), Tensor::ones(&[channels]));
            self.insert_param(format!("{name}.beta"), Tensor::zeros(&[channels]));
        }
        self.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]));
    }

    /// Folds one batch's statistics into the running estimates
    /// (momentum [`BN_MOMENTUM`], unbiased variance).
    pub fn update_running_stats(&mut self, name: &str, stats: &BatchStats) -> Result<()> {
        let n = stats.count as f64;
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        let mean = self
            .buffer_mut(&format!("{name}.running_mean"))
            .ok_or_else(|| Error::Config(format!("missing running mean for {name}")))?;
        for (r, m) in mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let var = self
            .buffer_mut(&format!("{name}.running_var"))
            .ok_or_else(|| Error::Config(format!("missing running variance for {name}")))?;
        for (r, v) in var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
        Ok(())
    }
}

/// Everything one forward pass records besides the tape.
#[derive(Debug, Default)]
pub struct Records {
    pub bn_stats: Vec<(String, BatchStats)>,
    pub traces: Option<Vec<LayerTrace>>,
    /// Per-layer query/key overlap scores from attention heads.
    pub ortho: Option<Vec<(String, f64)>>,
}

/// Forward-pass context: a fresh tape bound to a parameter store.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: HashMap<String, Var>,
    pub training: bool,
    pub lif: LifParams,
    pub time_steps: usize,
    pub records: Records,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, training: bool, lif: LifParams) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            vars: HashMap::new(),
            training,
            lif,
            time_steps: 1,
            records: Records::default(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn enable_traces(&mut self) {
        self.records.traces = Some(Vec::new());
    }

    pub fn enable_ortho(&mut self) {
        self.records.ortho = Some(Vec::new());
    }

    /// Tape variable for a stored parameter, recorded once per pass.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .param(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))?;
        let v = if self.training {
            self.tape.param(t)
        } else {
            self.tape.constant(t.clone())
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter variables recorded so far, by name.
    pub fn param_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// `x · W` over the last axis with `W = name.weight` of shape `[in, out]`,
    /// plus `name.bias` if stored.
    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let shape = self.tape.shape(x).to_vec();
        let ws = self.tape.shape(w).to_vec();
        let inner = *shape.last().ok_or_else(|| Error::dim("linear on a scalar"))?;
        if ws[0] != inner {
            return Err(Error::dim(format!("{name}: input width {inner} vs weight {ws:?}")));
        }
        let rows = shape.iter().product::<usize>() / inner.max(1);
        let flat = self.tape.reshape(x, &[rows, inner])?;
        let mut y = self.tape.matmul(flat, w)?;
        let bias_name = format!("{name}.bias");
        if self.store.param(&bias_name).is_some() {
            let b = self.param(&bias_name)?;
            y = self.tape.add_bias(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ws[1];
        self.tape.reshape(y, &out_shape)
    }

    pub fn conv(&mut self, x: Var, name: &str, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        self.tape.conv2d(x, w, 1, padding)
    }

    /// Batch norm over `channel_axis`; affine when `name.gamma` is stored.
    pub fn batch_norm(&mut self, x: Var, name: &str, channel_axis: usize) -> Result<Var> {
        let (gamma, beta) = if self.store.param(&format!("{name}.gamma")).is_some() {
            (
                Some(self.param(&format!("{name}.gamma"))?),
                Some(self.param(&format!("{name}.beta"))?),
            )
        } else {
            (None, None)
        };
        if self.training {
            let (y, stats) = self
                .tape
                .batch_norm(x, gamma, beta, channel_axis, BnMode::Train { eps: BN_EPS })?;
            if let Some(s) = stats {
                self.records.bn_stats.push((name.to_string(), s));
            }
            Ok(y)
        } else {
            let store = self.store;
            let mean = store
                .buffer(&format!("{name}.running_mean"))
                .ok_or_else(|| Error::Config(format!("missing running mean for {name}")))?;
            let var = store
                .buffer(&format!("{name}.running_var"))
                .ok_or_else(|| Error::Config(format!("missing running variance for {name}")))?;
            let mode = BnMode::Eval {
                mean: mean.data(),
                var: var.data(),
                eps: BN_EPS,
            };
            Ok(self.tape.batch_norm(x, gamma, beta, channel_axis, mode)?.0)
        }
    }

    /// Spiking neuron layer over the leading time axis.
    pub fn sn(&mut self, x: Var) -> Result<Var> {
        self.tape.lif(x, self.lif)
    }

    /// Logs a layer trace when tracing is on; `inputs` are the layer's spike inputs.
    pub fn trace(&mut self, name: &str, kind: LayerKind, flops: u64, inputs: &[Var]) {
        let Some(traces) = self.records.traces.as_mut() else { return };
        let rate = if inputs.is_empty() {
            0.0
        } else {
            inputs
                .iter()
                .map(|&v| firing_rate(self.tape.value(v).data()))
                .sum::<f64>()
                / inputs.len() as f64
        };
        traces.push(LayerTrace {
            name: name.to_string(),
            kind,
            flops,
            rate,
            time_steps: self.time_steps,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ParamStore::new();
        s.init_batch_norm("bn", 1, true);
        let stats = BatchStats {
            mean: vec![2.0],
            var: vec![1.0],
            count: 2,
        };
        s.update_running_stats("bn", &stats).unwrap();
        assert!((s.buffer("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-15);
        assert!((s.buffer("bn.running_var").unwrap().data()[0] - (0.9 + 0.2)).abs() < 1e-15);
        assert_eq!(s.num_trainable(), 2);
    }

    #[test]
    fn missing_parameter_is_config_error() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s, true, LifParams::default());
        assert!(matches!(g.param("nope"), Err(Error::Config(_))));
    }
}
