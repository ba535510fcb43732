//! AdamW with cosine decay, data-parallel gradient computation and evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tape::BatchStats;
use crate::tensor::Tensor;

use super::config::take;
use super::network::{argmax_rows, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            min_lr: 0.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            lr: take(map, "lr", d.lr)?,
            min_lr: take(map, "min_lr", d.min_lr)?,
            weight_decay: take(map, "weight_decay", d.weight_decay)?,
            beta1: take(map, "beta1", d.beta1)?,
            beta2: take(map, "beta2", d.beta2)?,
            eps: take(map, "eps", d.eps)?,
            epochs: take(map, "epochs", d.epochs)?,
            batch_size: take(map, "batch_size", d.batch_size)?,
            seed: take(map, "seed", d.seed)?,
            workers: take(map, "workers", d.workers)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.min_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(Error::Config("batch_size and workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// `lr_min + ½·(lr − lr_min)·(1 + cos(π·step/total))`, flat at `lr_min` past `total`.
pub fn cosine_lr(lr: f64, min_lr: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = (step.min(total) as f64) / total as f64;
    min_lr + 0.5 * (lr - min_lr) * (1.0 + (PI * frac).cos())
}

/// Adam moments with decoupled weight decay on weights of rank ≥ 2.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamW {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update from the `grad` fields of `store` at learning rate `lr`.
    pub fn update(&mut self, store: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, p) in store.params_mut() {
            let Some(g) = p.grad.take() else { continue };
            let decay = if p.rank() >= 2 { cfg.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *w);
            }
        }
    }
}

/// Result of a forward/backward pass on one shard.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub loss: f64,
    pub correct: usize,
    pub grads: BTreeMap<String, Vec<f64>>,
    pub bn_stats: Vec<(String, BatchStats)>,
    pub ortho: Vec<(String, f64)>,
}

/// Copies batch entries `[start, end)` out of a time-major `[T, B, ..]` tensor.
pub fn batch_slice(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 || start >= end || end > s[1] {
        return Err(Error::dim(format!("cannot take batch {start}..{end} of {s:?}")));
    }
    let per: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(s[0] * (end - start) * per);
    for t in 0..s[0] {
        let base = t * s[1] * per;
        data.extend_from_slice(&x.data()[base + start * per..base + end * per]);
    }
    let mut shape = s.to_vec();
    shape[1] = end - start;
    Tensor::new(shape, data)
}

/// Forward and backward on one shard; the loss is scaled by `loss_scale`.
pub fn compute_gradients(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    loss_scale: f64,
    track_ortho: bool,
) -> Result<Gradients> {
    let mut g = model.graph(true);
    if track_ortho {
        g.enable_ortho();
    }
    let x = g.tape.constant(batch.clone());
    let logits = model.forward(&mut g, x)?;
    let loss = g.tape.cross_entropy(logits, labels, loss_scale)?;
    let loss_value = g.tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {loss_value} on a shard of {} samples",
            labels.len()
        )));
    }
    let correct = argmax_rows(g.tape.value(logits))
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    g.tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, &v) in g.param_vars() {
        let grad = g.tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.tape.value(v).len()]);
        grads.insert(name.clone(), grad);
    }
    Ok(Gradients {
        loss: loss_value,
        correct,
        grads,
        bn_stats: std::mem::take(&mut g.records.bn_stats),
        ortho: g.records.ortho.take().unwrap_or_default(),
    })
}

fn pool_stats(parts: &[&BatchStats]) -> BatchStats {
    let total: usize = parts.iter().map(|s| s.count).sum();
    let channels = parts[0].mean.len();
    let mut mean = vec![0.0; channels];
    for s in parts {
        for (m, v) in mean.iter_mut().zip(&s.mean) {
            *m += v * s.count as f64 / total as f64;
        }
    }
    let mut var = vec![0.0; channels];
    for s in parts {
        for c in 0..channels {
            var[c] += s.count as f64 * (s.var[c] + (s.mean[c] - mean[c]).powi(2)) / total as f64;
        }
    }
    BatchStats {
        mean,
        var,
        count: total,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    /// Mean query/key overlap over attention layers, when tracked.
    pub ortho: Option<f64>,
}

#[derive(Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    /// Length of the cosine schedule in optimizer steps.
    pub total_steps: u64,
    pub track_ortho: bool,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model,
            opt: AdamW::new(),
            cfg,
            total_steps,
            track_ortho: false,
        })
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.cfg.lr, self.cfg.min_lr, self.opt.step, self.total_steps)
    }

    /// One optimizer step on a `[T, B, C, H, W]` batch; returns the mean loss.
    pub fn train_step(&mut self, batch: &Tensor, labels: &[usize]) -> Result<StepReport> {
        let b = labels.len();
        if batch.rank() < 2 || batch.shape()[1] != b || b == 0 {
            return Err(Error::dim(format!(
                "batch {:?} does not match {} labels",
                batch.shape(),
                b
            )));
        }
        let workers = self.cfg.workers.min(b);
        let scale = 1.0 / b as f64;
        let shards: Vec<(usize, usize)> = (0..workers)
            .map(|w| (w * b / workers, (w + 1) * b / workers))
            .collect();
        let results: Vec<Result<Gradients>> = if workers == 1 {
            vec![compute_gradients(&self.model, batch, labels, scale, self.track_ortho)]
        } else {
            let model = &self.model;
            let track = self.track_ortho;
            let inputs = shards
                .iter()
                .map(|&(s, e)| Ok((batch_slice(batch, s, e)?, &labels[s..e])))
                .collect::<Result<Vec<_>>>()?;
            std::thread::scope(|scope| {
                let handles: Vec<_> = inputs
                    .iter()
                    .map(|(x, y)| scope.spawn(move || compute_gradients(model, x, y, scale, track)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Training("worker panicked".into()))))
                    .collect()
            })
        };
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        let loss: f64 = results.iter().map(|r| r.loss).sum();
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss {loss} at step {}", self.opt.step)));
        }
        let correct: usize = results.iter().map(|r| r.correct).sum();
        for (name, p) in self.model.store.params_mut() {
            p.zero_grad();
            for r in &results {
                if let Some(g) = r.grads.get(name) {
                    p.accumulate_grad(g);
                }
            }
        }
        if let Some(bad) = self
            .model
            .store
            .params()
            .find(|(_, p)| p.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(Error::Training(format!(
                "non-finite gradient in '{}' at step {}",
                bad.0, self.opt.step
            )));
        }
        for (i, (name, _)) in results[0].bn_stats.iter().enumerate() {
            let parts: Vec<&BatchStats> = results.iter().map(|r| &r.bn_stats[i].1).collect();
            self.model.store.update_running_stats(name, &pool_stats(&parts))?;
        }
        let ortho = if self.track_ortho {
            let all: Vec<f64> = results.iter().flat_map(|r| r.ortho.iter().map(|(_, s)| *s)).collect();
            (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
        } else {
            None
        };
        let lr = self.current_lr();
        self.opt.update(&mut self.model.store, &self.cfg, lr);
        Ok(StepReport {
            loss,
            accuracy: correct as f64 / b as f64,
            lr,
            ortho,
        })
    }
}

/// Inference accuracy and mean cross-entropy over batches.
pub fn evaluate(model: &Model, batches: &[(Tensor, Vec<usize>)]) -> Result<(f64, f64)> {
    let (mut correct, mut total, mut loss) = (0usize, 0usize, 0.0);
    for (x, y) in batches {
        let logits = model.logits(x)?;
        let k = model.config.classes;
        for (row, &label) in logits.data().chunks(k).zip(y) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += z.ln() + max - row[label];
        }
        correct += argmax_rows(&logits).iter().zip(y).filter(|(p, l)| p == l).count();
        total += y.len();
    }
    if total == 0 {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    Ok((correct as f64 / total as f64, loss / total as f64))
}
