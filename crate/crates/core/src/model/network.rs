//! Network assembly: patch embedding, position embedding, encoder stack and classifier.
//!
//! Activations are time-major, `[T, B, ..]`; time and batch are merged for
//! convolutions and batch norm, and split again for the spiking layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::{self, head_potential};
use crate::nn::{Graph, ParamStore};
use crate::profiler::{conv_flops, fc_flops, LayerKind, LayerTrace};
use crate::tape::Var;
use crate::tensor::Tensor;

use super::config::{ModelConfig, Shortcut};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    /// Fresh model with Kaiming-uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let ladder = sps_channels(c);
        for i in 0..4 {
            let (cin, cout) = (ladder[i], ladder[i + 1]);
            store.init_weight(&format!("sps.conv{i}.weight"), &[cout, cin, 3, 3], cin * 9, &mut rng);
            store.init_batch_norm(&format!("sps.bn{i}"), cout, true);
        }
        store.init_weight("cpe.conv.weight", &[c.dim, c.dim, 3, 3], c.dim * 9, &mut rng);
        store.init_batch_norm("cpe.bn", c.dim, true);
        let hidden = c.dim * c.mlp_ratio;
        for l in 0..c.layers {
            heads::init_head(&mut store, &format!("layers.{l}.mix"), &c.mixer, c.dim, &mut rng);
            store.init_weight(&format!("layers.{l}.fc1.weight"), &[c.dim, hidden], c.dim, &mut rng);
            store.init_batch_norm(&format!("layers.{l}.bn1"), hidden, true);
            store.init_weight(&format!("layers.{l}.fc2.weight"), &[hidden, c.dim], hidden, &mut rng);
            store.init_batch_norm(&format!("layers.{l}.bn2"), c.dim, true);
        }
        store.init_weight("classifier.weight", &[c.dim, c.classes], c.dim, &mut rng);
        store.insert_param("classifier.bias", Tensor::zeros(&[c.classes]));
        Ok(Model { config, store })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Trainable scalars inside the token-mixing heads, batch norm excluded.
    pub fn head_parameters(&self) -> usize {
        self.config.layers * heads::head_parameter_count(&self.config.mixer, self.config.dim)
    }

    pub fn graph(&self, training: bool) -> Graph<'_> {
        let mut g = Graph::new(&self.store, training, self.config.lif);
        g.time_steps = self.config.time_steps;
        g
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.config;
        if shape.len() != 5 || shape[0] != c.time_steps || shape[2] != c.channels || shape[3] != c.height || shape[4] != c.width {
            return Err(Error::dim(format!(
                "expected input [{}, B, {}, {}, {}], got {shape:?}",
                c.time_steps, c.channels, c.height, c.width
            )));
        }
        if shape[1] == 0 {
            return Err(Error::EmptyInput("batch of size 0".into()));
        }
        Ok(shape[1])
    }

    /// Spiking patch splitting: `[T, B, C, H, W]` → spikes `[T, B, N, D]`.
    pub fn sps_forward(&self, g: &mut Graph<'_>, input: Var) -> Result<Var> {
        let b = self.check_input(g.tape.shape(input))?;
        let c = &self.config;
        let ladder = sps_channels(c);
        let pool_from = 4 - c.pooled_blocks();
        let (t, mut h, mut w) = (c.time_steps, c.height, c.width);
        let mut x = g.tape.reshape(input, &[t * b, c.channels, h, w])?;
        for i in 0..4 {
            let kind = if i == 0 { LayerKind::ConvFirst } else { LayerKind::Conv };
            g.trace(&format!("sps.conv{i}"), kind, conv_flops(ladder[i], ladder[i + 1], 3, h, w), &[x]);
            let y = g.conv(x, &format!("sps.conv{i}"), 1)?;
            let y = g.batch_norm(y, &format!("sps.bn{i}"), 1)?;
            let y = g.tape.reshape(y, &[t, b, ladder[i + 1], h, w])?;
            let s = g.sn(y)?;
            x = g.tape.reshape(s, &[t * b, ladder[i + 1], h, w])?;
            if i >= pool_from {
                x = g.tape.maxpool2(x)?;
                h /= 2;
                w /= 2;
            }
        }
        let x = g.tape.reshape(x, &[t, b, c.dim, h * w])?;
        g.tape.permute(x, &[0, 1, 3, 2])
    }

    /// Convolutional position embedding on the patch grid, merged with a logical OR.
    pub fn cpe_rpe(&self, g: &mut Graph<'_>, p: Var) -> Result<Var> {
        let shape = g.tape.shape(p).to_vec();
        let c = &self.config;
        let (gh, gw) = c.grid();
        if shape.len() != 4 || shape[2] != gh * gw || shape[3] != c.dim {
            return Err(Error::dim(format!("position embedding expects [T, B, {}, {}], got {shape:?}", gh * gw, c.dim)));
        }
        let (t, b) = (shape[0], shape[1]);
        let grid = g.tape.permute(p, &[0, 1, 3, 2])?;
        let grid = g.tape.reshape(grid, &[t * b, c.dim, gh, gw])?;
        g.trace("cpe.conv", LayerKind::Conv, conv_flops(c.dim, c.dim, 3, gh, gw), &[grid]);
        let y = g.conv(grid, "cpe.conv", 1)?;
        let y = g.batch_norm(y, "cpe.bn", 1)?;
        let y = g.tape.reshape(y, &[t, b, c.dim, gh * gw])?;
        let rpe = g.sn(y)?;
        let rpe = g.tape.permute(rpe, &[0, 1, 3, 2])?;
        g.tape.or(p, rpe)
    }

    fn mlp_potential(&self, g: &mut Graph<'_>, x: Var, l: usize) -> Result<Var> {
        let c = &self.config;
        let n = c.seq_len();
        let hidden = c.dim * c.mlp_ratio;
        g.trace(&format!("layers.{l}.fc1"), LayerKind::Fc, fc_flops(c.dim, hidden, n), &[x]);
        let h = g.linear(x, &format!("layers.{l}.fc1"))?;
        let h = g.batch_norm(h, &format!("layers.{l}.bn1"), 3)?;
        let h = g.sn(h)?;
        g.trace(&format!("layers.{l}.fc2"), LayerKind::Fc, fc_flops(hidden, c.dim, n), &[h]);
        let y = g.linear(h, &format!("layers.{l}.fc2"))?;
        g.batch_norm(y, &format!("layers.{l}.bn2"), 3)
    }

    /// One encoder layer.
    ///
    /// With the vanilla shortcut `state` is spikes and the result is
    /// `X′ = SN(head(X)) ∨ X`, `X″ = SN(MLP(X′)) ∨ X′`. With the membrane
    /// shortcut `state` is the membrane stream `U` and the result is
    /// `U′ = U + head(SN(U))`, `U″ = U′ + MLP(SN(U′))`.
    pub fn encoder_layer(&self, g: &mut Graph<'_>, state: Var, l: usize) -> Result<Var> {
        let prefix = format!("layers.{l}.mix");
        match self.config.shortcut {
            Shortcut::Vanilla => {
                let u = head_potential(g, state, &prefix, &self.config.mixer)?;
                let s = g.sn(u)?;
                let x1 = g.tape.or(s, state)?;
                let y = self.mlp_potential(g, x1, l)?;
                let s = g.sn(y)?;
                g.tape.or(s, x1)
            }
            Shortcut::Membrane => {
                let s = g.sn(state)?;
                let u = head_potential(g, s, &prefix, &self.config.mixer)?;
                let u1 = g.tape.add(state, u)?;
                let s1 = g.sn(u1)?;
                let y = self.mlp_potential(g, s1, l)?;
                g.tape.add(u1, y)
            }
        }
    }

    /// Encoder stack; returns binary spikes `X_L`.
    pub fn encoder(&self, g: &mut Graph<'_>, x0: Var) -> Result<Var> {
        let mut x = x0;
        for l in 0..self.config.layers {
            x = self.encoder_layer(g, x, l)?;
        }
        match self.config.shortcut {
            Shortcut::Vanilla => Ok(x),
            Shortcut::Membrane => g.sn(x),
        }
    }

    /// Global average over time and tokens, then a dense layer to real logits `[B, classes]`.
    pub fn classify(&self, g: &mut Graph<'_>, xl: Var) -> Result<Var> {
        let c = &self.config;
        g.trace("classifier", LayerKind::Fc, fc_flops(c.dim, c.classes, 1), &[xl]);
        let over_t = g.tape.mean_axis(xl, 0)?;
        let pooled = g.tape.mean_axis(over_t, 1)?;
        g.linear(pooled, "classifier")
    }

    /// Full forward pass to logits.
    pub fn forward(&self, g: &mut Graph<'_>, input: Var) -> Result<Var> {
        let p = self.sps_forward(g, input)?;
        let x0 = self.cpe_rpe(g, p)?;
        let xl = self.encoder(g, x0)?;
        self.classify(g, xl)
    }

    /// Inference-mode logits for a `[T, B, C, H, W]` batch.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = self.graph(false);
        let x = g.tape.constant(input.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.tape.value(y).clone())
    }

    pub fn predict(&self, input: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(input)?))
    }

    /// Inference pass that logs one trace per accounted layer.
    pub fn record_rates(&self, input: &Tensor) -> Result<Vec<LayerTrace>> {
        let mut g = self.graph(false);
        g.enable_traces();
        let x = g.tape.constant(input.clone());
        self.forward(&mut g, x)?;
        Ok(g.records.traces.take().unwrap_or_default())
    }
}

/// Channel ladder `C → D/8 → D/4 → D/2 → D` of the patch embedding.
pub fn sps_channels(c: &ModelConfig) -> [usize; 5] {
    [c.channels, c.dim / 8, c.dim / 4, c.dim / 2, c.dim]
}

/// Row-wise argmax of a `[B, K]` tensor; first maximum wins.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
