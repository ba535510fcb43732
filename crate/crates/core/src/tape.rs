//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] owns every value produced during one forward pass. Nodes are
//! appended in execution order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::spiking::{self, LifParams};
use crate::tensor::{numel, Tensor};
use crate::transforms::{slice_dims, Mixer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour for one call.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalise with batch statistics.
    Train { eps: f64 },
    /// Normalise with supplied running statistics.
    Eval { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Per-channel batch statistics (biased variance) from a training-mode call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, p: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, p: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        outer: usize,
        channels: usize,
        inner: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Or { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    AddScalar { x: Var },
    ScaleByVar { x: Var, s: Var },
    AddBias { x: Var, bias: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Sum { x: Var },
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Lif { x: Var, params: LifParams, charged: Vec<f64> },
    Spike { x: Var, alpha: f64 },
    Mix { x: Var, mixer: Mixer, batch: usize, n: usize, d: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64>, scale: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.data().iter().all(|v| v.is_finite()), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf, copying the parameter's current values.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, p], out), Op::MatMul { a, b, m, k, p }, rg))
    }

    /// Batched matmul over every leading axis: `[.., m, k] · [.., k, p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ra = sa.len();
        if ra < 2 || sb.len() != ra || sa[..ra - 2] != sb[..ra - 2] || sa[ra - 1] != sb[ra - 2] {
            return Err(Error::dim(format!("bmm of {sa:?} by {sb:?}")));
        }
        let batch: usize = sa[..ra - 2].iter().product();
        let (m, k, p) = (sa[ra - 2], sa[ra - 1], sb[ra - 1]);
        let mut out = vec![0.0; batch * m * p];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::matmul_into(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * p..(i + 1) * k * p],
                    &mut out[i * m * p..(i + 1) * m * p],
                    m,
                    k,
                    p,
                );
            }
        }
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, p]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchMatMul { a, b, batch, m, k, p },
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::dim(format!("conv2d of {sx:?} with kernel {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be >= 1"));
        }
        let k = sw[2];
        if k > sx[2] + 2 * padding || k > sx[3] + 2 * padding {
            return Err(Error::dim(format!(
                "kernel {k} larger than padded input {}x{}",
                sx[2] + 2 * padding,
                sx[3] + 2 * padding
            )));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            out_ch: sw[0],
            height: sx[2],
            width: sx[3],
            kernel: k,
            stride,
            padding,
        };
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), &geom);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, geom }, rg))
    }

    /// Batch normalisation over `channel_axis`; every other axis is pooled.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        channel_axis: usize,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if channel_axis >= shape.len() {
            return Err(Error::dim(format!("channel axis {channel_axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..channel_axis].iter().product();
        let channels = shape[channel_axis];
        let inner: usize = shape[channel_axis + 1..].iter().product();
        let count = outer * inner;
        if count == 0 {
            return Err(Error::EmptyInput("batch norm over an empty batch".into()));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if let Some(p) = p {
                if self.shape(p) != [channels] {
                    return Err(Error::dim(format!("{name} must have shape [{channels}]")));
                }
            }
        }
        let xv = self.value(x).data();
        let (mean, var, stats, eps, training) = match mode {
            BnMode::Train { eps } => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        mean[c] += xv[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        var[c] += xv[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats), eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::dim("running statistics do not match channel count"));
                }
                (mean.to_vec(), var.to_vec(), None, eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = gamma.map(|v| self.value(v).data().to_vec());
        let b = beta.map(|v| self.value(v).data().to_vec());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                let gc = g.as_ref().map_or(1.0, |g| g[c]);
                let bc = b.as_ref().map_or(0.0, |b| b[c]);
                for i in base..base + inner {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gc * h + bc;
                }
            }
        }
        let rg = self.rg(x) || gamma.is_some_and(|v| self.rg(v)) || beta.is_some_and(|v| self.rg(v));
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            outer,
            channels,
            inner,
            xhat,
            inv_std,
            training,
        };
        Ok((self.push(Tensor::from_parts(shape, out), op, rg), stats))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Probabilistic OR `a + b − a·b`; for binary inputs this is `min(a + b, 1)`.
    pub fn or(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "or", |x, y| x + y - x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Or { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|e| e * s).collect());
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|e| e + c).collect());
        let rg = self.rg(x);
        self.push(t, Op::AddScalar { x }, rg)
    }

    /// `s·x` for a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by expects a one-element scalar"));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|e| e * sv).collect());
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::ScaleByVar { x, s }, rg))
    }

    /// Adds `bias` (length = last axis) to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::dim("add_bias on a scalar"))?;
        if self.shape(bias) != [width] {
            return Err(Error::dim(format!("bias {:?} does not match last axis {width}", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % width])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias { x, bias }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (data, out_shape) = kernels::permute(self.value(x).data(), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// 2×2 stride-2 max pool over the last two axes of `[B, C, H, W]`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::dim(format!("maxpool2 needs [B,C,even H,even W], got {s:?}")));
        }
        let (out, argmax) = kernels::maxpool2(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1], s[2] / 2, s[3] / 2], out),
            Op::MaxPool2 { x, argmax },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim(format!("cannot average axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MeanAxis { x, outer, len, inner },
            rg,
        ))
    }

    /// LIF layer over the leading time axis.
    pub fn lif(&mut self, x: Var, params: LifParams) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] == 0 {
            return Err(Error::EmptyInput("LIF input needs a non-empty time axis".into()));
        }
        let (spikes, charged) = spiking::lif_forward(self.value(x).data(), shape[0], &params);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, spikes),
            Op::Lif { x, params, charged },
            rg,
        ))
    }

    /// Heaviside with surrogate backward.
    pub fn spike(&mut self, x: Var, alpha: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&u| spiking::heaviside(u)).collect(),
        );
        let rg = self.rg(x);
        self.push(t, Op::Spike { x, alpha }, rg)
    }

    /// Applies a fixed linear mixer to the trailing `[N, D]` axes.
    pub fn mix(&mut self, x: Var, mixer: &Mixer) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, n, d) = slice_dims(&shape)?;
        let out = mixer.apply(self.value(x).data(), batch, n, d)?;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Mix {
                x,
                mixer: mixer.clone(),
                batch,
                n,
                d,
            },
            rg,
        ))
    }

    /// `scale · Σ_b −log softmax(logits_b)[label_b]` as a one-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], scale: f64) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::dim(format!(
                "cross entropy needs [B, K] logits with B labels, got {s:?} and {}",
                labels.len()
            )));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[labels[i]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(scale * loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                scale,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element loss. Callable once per recording.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward already ran on this tape; record a new pass"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, p } => {
                acc(a, &|da| kernels::matmul_grad_a(g, val(b), da, m, k, p));
                acc(b, &|db| kernels::matmul_grad_b(val(a), g, db, m, k, p));
            }
            &Op::BatchMatMul { a, b, batch, m, k, p } => {
                acc(a, &|da| {
                    for i in 0..batch {
                        kernels::matmul_grad_a(
                            &g[i * m * p..(i + 1) * m * p],
                            &val(b)[i * k * p..(i + 1) * k * p],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            p,
                        );
                    }
                });
                acc(b, &|db| {
                    for i in 0..batch {
                        kernels::matmul_grad_b(
                            &val(a)[i * m * k..(i + 1) * m * k],
                            &g[i * m * p..(i + 1) * m * p],
                            &mut db[i * k * p..(i + 1) * k * p],
                            m,
                            k,
                            p,
                        );
                    }
                });
            }
            &Op::Conv2d { x, w, ref geom } => {
                let want_dx = self.nodes[x.0].requires_grad;
                let (dx, dw) = kernels::conv2d_backward(val(x), val(w), g, geom, want_dx);
                if let Some(dx) = dx {
                    acc(x, &|s| add_into(s, &dx));
                }
                acc(w, &|s| add_into(s, &dw));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                outer,
                channels,
                inner,
                xhat,
                inv_std,
                training,
            } => {
                let (outer, channels, inner) = (*outer, *channels, *inner);
                let count = (outer * inner) as f64;
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        for i in base..base + inner {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(gm) = *gamma {
                    acc(gm, &|s| add_into(s, &sum_gx));
                }
                if let Some(bt) = *beta {
                    acc(bt, &|s| add_into(s, &sum_g));
                }
                let gam: Vec<f64> = match gamma {
                    Some(gm) => val(*gm).to_vec(),
                    None => vec![1.0; channels],
                };
                acc(*x, &|dx| {
                    for o in 0..outer {
                        for c in 0..channels {
                            let base = (o * channels + c) * inner;
                            let k = gam[c] * inv_std[c];
                            for i in base..base + inner {
                                dx[i] += if *training {
                                    k * (g[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &|s| add_into(s, g));
                acc(b, &|s| add_into(s, g));
            }
            &Op::Sub { a, b } => {
                acc(a, &|s| add_into(s, g));
                acc(b, &|s| s.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            &Op::Mul { a, b } => {
                acc(a, &|s| fused(s, g, val(b), |gv, o| gv * o));
                acc(b, &|s| fused(s, g, val(a), |gv, o| gv * o));
            }
            &Op::Or { a, b } => {
                acc(a, &|s| fused(s, g, val(b), |gv, o| gv * (1.0 - o)));
                acc(b, &|s| fused(s, g, val(a), |gv, o| gv * (1.0 - o)));
            }
            &Op::Scale { x, s } => acc(x, &|d| d.iter_mut().zip(g).for_each(|(d, v)| *d += s * v)),
            &Op::AddScalar { x } => acc(x, &|d| add_into(d, g)),
            &Op::ScaleByVar { x, s } => {
                let sv = val(s)[0];
                acc(x, &|d| d.iter_mut().zip(g).for_each(|(d, v)| *d += sv * v));
                acc(s, &|d| d[0] += kernels::dot(g, val(x)));
            }
            &Op::AddBias { x, bias } => {
                acc(x, &|d| add_into(d, g));
                acc(bias, &|d| {
                    let w = d.len();
                    for (i, v) in g.iter().enumerate() {
                        d[i % w] += v;
                    }
                });
            }
            &Op::Reshape { x } => acc(x, &|d| add_into(d, g)),
            Op::Permute { x, perm } => {
                let (back, _) = kernels::permute(g, node.value.shape(), &kernels::inverse_permutation(perm));
                acc(*x, &|d| add_into(d, &back));
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &|d| {
                for (gv, &src) in g.iter().zip(argmax) {
                    d[src] += gv;
                }
            }),
            &Op::Sum { x } => acc(x, &|d| d.iter_mut().for_each(|v| *v += g[0])),
            &Op::MeanAxis { x, outer, len, inner } => acc(x, &|d| {
                let inv = 1.0 / len as f64;
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        for (dv, s) in d[(o * len + l) * inner..(o * len + l + 1) * inner].iter_mut().zip(src) {
                            *dv += s * inv;
                        }
                    }
                }
            }),
            Op::Lif { x, params, charged } => {
                let steps = node.value.shape()[0];
                let gx = spiking::lif_backward(g, node.value.data(), charged, steps, params);
                acc(*x, &|d| add_into(d, &gx));
            }
            &Op::Spike { x, alpha } => acc(x, &|d| {
                for ((dv, gv), &u) in d.iter_mut().zip(g).zip(val(x)) {
                    *dv += gv * spiking::surrogate_grad(u, alpha);
                }
            }),
            Op::Mix { x, mixer, batch, n, d } => {
                let back = mixer
                    .apply_adjoint(g, *batch, *n, *d)
                    .expect("adjoint shape was validated on the forward pass");
                acc(*x, &|s| add_into(s, &back));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                scale,
            } => acc(*logits, &|d| {
                let k = probs.len() / labels.len();
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..k {
                        let target = if j == l { 1.0 } else { 0.0 };
                        d[i * k + j] += g[0] * scale * (probs[i * k + j] - target);
                    }
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn fused(dst: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(other) {
        *d += f(gv, o);
    }
}

/// Element count helper kept next to the tape for callers building shapes.
pub fn elements(shape: &[usize]) -> usize {
    numel(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap().with_grad());
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let mut t = Tape::new();
        let data = vec![-1.5, 0.0, 2.0];
        let x = t.leaf(Tensor::from_vec(data.clone()).with_grad());
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(t.grad(x).unwrap(), &want[..]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0).with_grad());
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_small_cases() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0]);
        let a = t.constant(Tensor::from_rows(&[&[1.0, 1.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[2.0]);
        assert!(matches!(t.matmul(a, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_one_by_one_scales() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = t.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = t.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 3, 3]);
        assert!(t.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_impulse_stamps_flipped_kernel() {
        let mut t = Tape::new();
        let mut img = Tensor::zeros(&[1, 1, 5, 5]);
        img.data_mut()[2 * 5 + 2] = 1.0;
        let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = t.constant(img);
        let w = t.constant(Tensor::new(vec![1, 1, 3, 3], kernel.clone()).unwrap());
        let y = t.conv2d(x, w, 1, 1).unwrap();
        let out = t.value(y);
        // cross-correlation: out[2+a, 2+b] = w[1-a, 1-b]
        for a in -1i32..=1 {
            for b in -1i32..=1 {
                let got = out.get(&[0, 0, (2 + a) as usize, (2 + b) as usize]);
                let want = kernel[((1 - a) * 3 + (1 - b)) as usize];
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn conv_kernel_too_large() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[1, 1, 2, 2]));
        let w = t.constant(Tensor::ones(&[1, 1, 5, 5]));
        assert!(matches!(t.conv2d(x, w, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn batch_norm_constant_and_scale_kill() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[4, 3], 7.0));
        let (y, stats) = t.batch_norm(x, None, None, 1, BnMode::Train { eps: 1e-5 }).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.unwrap().mean, vec![7.0; 3]);
        let x = t.constant(Tensor::new(vec![2, 2], vec![1.0, 5.0, -3.0, 2.0]).unwrap());
        let gamma = t.constant(Tensor::zeros(&[2]));
        let beta = t.constant(Tensor::from_vec(vec![0.5, -1.0]));
        let (y, _) = t.batch_norm(x, Some(gamma), Some(beta), 1, BnMode::Train { eps: 1e-5 }).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn batch_norm_empty_batch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(
            t.batch_norm(x, None, None, 1, BnMode::Train { eps: 1e-5 }),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn or_of_overlapping_spikes_stays_binary() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0]));
        let b = t.constant(Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0]));
        let c = t.or(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 4]).with_grad());
        let l = t.cross_entropy(x, &[0, 3], 0.5).unwrap();
        assert!((t.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap();
        assert!((g[0] + 0.375).abs() < 1e-12 && (g[1] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn gradients_skip_constants() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::ones(&[2]));
        let x = t.leaf(Tensor::ones(&[2]).with_grad());
        let y = t.mul(c, x).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0]);
    }
}
