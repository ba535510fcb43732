//! Token-mixing heads: spiking self-attention and the fixed-transform FW head.
//!
//! Both consume and produce binary spikes of shape `[T, .., N, D]`, so they can
//! be swapped without touching the rest of the network.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Graph, ParamStore};
use crate::profiler::{fc_flops, LayerKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transforms::fft::butterfly_count;
use crate::transforms::{Mixer, WaveletBasis, WaveletKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixerKind {
    Ssa,
    Fft1d,
    Fft2d,
    Wt(WaveletKind),
    WtCombined,
}

impl MixerKind {
    pub const ALL: [MixerKind; 8] = [
        MixerKind::Ssa,
        MixerKind::Fft1d,
        MixerKind::Fft2d,
        MixerKind::Wt(WaveletKind::Haar),
        MixerKind::Wt(WaveletKind::Db1),
        MixerKind::Wt(WaveletKind::Bior11),
        MixerKind::Wt(WaveletKind::Rbio11),
        MixerKind::WtCombined,
    ];

    pub fn name(self) -> String {
        match self {
            MixerKind::Ssa => "ssa".into(),
            MixerKind::Fft1d => "fft1d".into(),
            MixerKind::Fft2d => "fft2d".into(),
            MixerKind::Wt(k) => format!("wt-{}", k.name()),
            MixerKind::WtCombined => "wt-combined".into(),
        }
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "ssa" => Ok(MixerKind::Ssa),
            "fft1d" => Ok(MixerKind::Fft1d),
            "fft2d" => Ok(MixerKind::Fft2d),
            "wt-combined" => Ok(MixerKind::WtCombined),
            _ => match s.strip_prefix("wt-") {
                Some(basis) => Ok(MixerKind::Wt(basis.parse()?)),
                None => Err(Error::Config(format!("unknown head '{s}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultOrder {
    /// `(Q·Kᵀ)·V`
    QkFirst,
    /// `Q·(Kᵀ·V)`
    KvFirst,
}

impl FromStr for MultOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qk_first" => Ok(MultOrder::QkFirst),
            "kv_first" => Ok(MultOrder::KvFirst),
            other => Err(Error::Config(format!("unknown multiplication order '{other}'"))),
        }
    }
}

impl fmt::Display for MultOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MultOrder::QkFirst => "qk_first",
            MultOrder::KvFirst => "kv_first",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixerSpec {
    pub kind: MixerKind,
    pub heads: usize,
    pub scale: f64,
    pub mult_order: MultOrder,
}

impl Default for MixerSpec {
    fn default() -> Self {
        MixerSpec {
            kind: MixerKind::Ssa,
            heads: 8,
            scale: 0.125,
            mult_order: MultOrder::QkFirst,
        }
    }
}

impl MixerSpec {
    pub fn new(kind: MixerKind) -> Self {
        MixerSpec {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("attention scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Fixed transform behind an FW head; `None` for attention and the learnable combination.
    pub fn fixed_mixer(&self) -> Option<Mixer> {
        match self.kind {
            MixerKind::Fft1d => Some(Mixer::Fourier1d),
            MixerKind::Fft2d => Some(Mixer::Fourier2d),
            MixerKind::Wt(k) => Some(Mixer::Wavelet2d(WaveletBasis::new(k))),
            MixerKind::Ssa | MixerKind::WtCombined => None,
        }
    }
}

/// Bases of the learnable wavelet combination, in coefficient order `a, b, c`.
pub const COMBINED_BASES: [WaveletKind; 3] = [WaveletKind::Bior11, WaveletKind::Haar, WaveletKind::Db1];
const COMBINED_COEFFS: [&str; 3] = ["coef_a", "coef_b", "coef_c"];

fn wavelet_macs(kind: WaveletKind, n: usize, d: usize) -> u64 {
    let len = WaveletBasis::new(kind).filter_len() as u64;
    2 * (2 * len * (n * d) as u64)
}

/// Multiply-accumulate count of one head on one `[N, D]` slice.
///
/// | head | MACs |
/// |---|---|
/// | SSA, `QkFirst` | `2·H·N²·d + 3·N·D²` |
/// | SSA, `KvFirst` | `2·H·N·d² + 3·N·D²` |
/// | FFT-1D | `D·(N/2)·log₂N` butterflies |
/// | FFT-2D | FFT-1D `+ N·(D/2)·log₂D` |
/// | WT | `2 axes · 2·filter_len·N·D` |
/// | WT-combined | `3·WT + 3·N·D` |
///
/// with `d = D/H`; FFT lengths are padded to the next power of two.
pub fn count_ops(spec: &MixerSpec, n: usize, dim: usize) -> u64 {
    let (nu, du) = (n as u64, dim as u64);
    match spec.kind {
        MixerKind::Ssa => {
            let h = spec.heads.max(1) as u64;
            let d = du / h;
            let products = match spec.mult_order {
                MultOrder::QkFirst => 2 * h * nu * nu * d,
                MultOrder::KvFirst => 2 * h * nu * d * d,
            };
            products + 3 * nu * du * du
        }
        MixerKind::Fft1d => du * butterfly_count(n.next_power_of_two()),
        MixerKind::Fft2d => {
            du * butterfly_count(n.next_power_of_two()) + nu * butterfly_count(dim.next_power_of_two())
        }
        MixerKind::Wt(k) => wavelet_macs(k, n, dim),
        MixerKind::WtCombined => {
            COMBINED_BASES.iter().map(|&k| wavelet_macs(k, n, dim)).sum::<u64>() + 3 * nu * du
        }
    }
}

/// Multiply-accumulates of the attention products alone (no projections).
pub fn attention_macs(spec: &MixerSpec, n: usize, dim: usize) -> u64 {
    count_ops(spec, n, dim) - 3 * (n * dim * dim) as u64
}

/// Trainable scalars owned by the mixing operation itself (batch norm excluded).
pub fn head_parameter_count(spec: &MixerSpec, dim: usize) -> usize {
    match spec.kind {
        MixerKind::Ssa => 4 * dim * dim,
        MixerKind::WtCombined => 3,
        _ => 0,
    }
}

/// Registers the parameters of one head under `prefix`.
pub fn init_head<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, spec: &MixerSpec, dim: usize, rng: &mut R) {
    match spec.kind {
        MixerKind::Ssa => {
            for p in ["q", "k", "v"] {
                store.init_weight(&format!("{prefix}.{p}.weight"), &[dim, dim], dim, rng);
                store.init_batch_norm(&format!("{prefix}.{p}_bn"), dim, false);
            }
            store.init_weight(&format!("{prefix}.o.weight"), &[dim, dim], dim, rng);
            store.init_batch_norm(&format!("{prefix}.o_bn"), dim, true);
        }
        MixerKind::WtCombined => {
            for c in COMBINED_COEFFS {
                store.insert_param(format!("{prefix}.{c}"), Tensor::scalar(1.0 / 3.0));
            }
            store.init_batch_norm(&format!("{prefix}.bn"), dim, true);
        }
        _ => store.init_batch_norm(&format!("{prefix}.bn"), dim, true),
    }
}

fn require_binary(g: &Graph<'_>, x: Var) -> Result<()> {
    if !g.tape.value(x).is_binary() {
        return Err(Error::contract("head input must be binary spikes"));
    }
    Ok(())
}

fn token_dims(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 3 {
        return Err(Error::dim(format!("head input must be [T, .., N, D], got {shape:?}")));
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

/// `Q·Kᵀ·V·s` per head on `[.., N, D]` inputs, before any spiking layer.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, scale: f64, order: MultOrder) -> Result<Var> {
    let split = |tape: &mut Tape, x: Var| -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || !shape[r - 1].is_multiple_of(heads) {
            return Err(Error::dim(format!("cannot split {shape:?} into {heads} heads")));
        }
        let mut s = shape[..r - 1].to_vec();
        s.extend([heads, shape[r - 1] / heads]);
        let y = tape.reshape(x, &s)?;
        let mut perm: Vec<usize> = (0..=r).collect();
        perm.swap(r - 2, r - 1);
        tape.permute(y, &perm)
    };
    let shape = tape.shape(q).to_vec();
    if tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(Error::dim("query, key and value shapes differ"));
    }
    let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
    let kt = tape.transpose_last2(kh)?;
    let mixed = match order {
        MultOrder::QkFirst => {
            let a = tape.bmm(qh, kt)?;
            tape.bmm(a, vh)?
        }
        MultOrder::KvFirst => {
            let kv = tape.bmm(kt, vh)?;
            tape.bmm(qh, kv)?
        }
    };
    let scaled = tape.scale(mixed, scale);
    let r = shape.len();
    let mut perm: Vec<usize> = (0..=r).collect();
    perm.swap(r - 2, r - 1);
    let merged = tape.permute(scaled, &perm)?;
    tape.reshape(merged, &shape)
}

/// Mean [`orthogonality_score`] over every `[N, d]` head slice of spike `Q`, `K`
/// given as `[.., N, D]`.
pub fn head_orthogonality(q: &Tensor, k: &Tensor, heads: usize) -> Result<f64> {
    let shape = q.shape();
    if k.shape() != shape || shape.len() < 2 {
        return Err(Error::dim("query and key shapes differ"));
    }
    let (n, dim) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::dim(format!("{dim} features do not split into {heads} heads")));
    }
    let d = dim / heads;
    let slices = q.len() / (n * dim);
    let mut total = 0.0;
    let mut qs = vec![0.0; n * d];
    let mut ks = vec![0.0; n * d];
    for s in 0..slices {
        for h in 0..heads {
            for i in 0..n {
                let src = s * n * dim + i * dim + h * d;
                qs[i * d..(i + 1) * d].copy_from_slice(&q.data()[src..src + d]);
                ks[i * d..(i + 1) * d].copy_from_slice(&k.data()[src..src + d]);
            }
            total += overlap(&qs, &ks, n, d);
        }
    }
    Ok(total / (slices * heads) as f64)
}

fn overlap(q: &[f64], k: &[f64], n: usize, d: usize) -> f64 {
    let kt = kernels::transpose_last2(k, 1, n, d);
    let mut a = vec![0.0; n * n];
    kernels::matmul_into(q, &kt, &mut a, n, d, n);
    let mut rows: Vec<&mut [f64]> = a.chunks_mut(n).collect();
    let mut live = Vec::with_capacity(n);
    for row in rows.iter_mut() {
        let norm = kernels::dot(row, row).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
            live.push(&**row);
        }
    }
    let mut score = 0.0;
    for (i, ri) in live.iter().enumerate() {
        for (j, rj) in live.iter().enumerate() {
            if i != j {
                score += kernels::dot(ri, rj).abs();
            }
        }
    }
    score
}

/// Pairwise overlap of the basis rows of `A = Q·Kᵀ`:
/// `Σ_{i≠j} |⟨Â_i, Â_j⟩|` over unit-normalised non-zero rows.
pub fn orthogonality_score(q: &Tensor, k: &Tensor) -> Result<f64> {
    if q.rank() != 2 || k.rank() != 2 || q.shape() != k.shape() {
        return Err(Error::dim(format!(
            "orthogonality needs matching [N, d] inputs, got {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    Ok(overlap(q.data(), k.data(), n, d))
}

/// Overlap score logged once per training step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrthoTrace {
    pub scores: Vec<f64>,
}

impl OrthoTrace {
    pub fn push(&mut self, score: f64) {
        self.scores.push(score);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Least-squares slope of score against step index.
    pub fn slope(&self) -> f64 {
        let n = self.scores.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mx = (n - 1.0) / 2.0;
        let my = self.scores.iter().sum::<f64>() / n;
        let (mut num, mut den) = (0.0, 0.0);
        for (i, y) in self.scores.iter().enumerate() {
            let dx = i as f64 - mx;
            num += dx * (y - my);
            den += dx * dx;
        }
        num / den
    }

    /// Means of the first and last `fraction` of the trace.
    pub fn window_means(&self, fraction: f64) -> (f64, f64) {
        let n = self.scores.len();
        if n == 0 {
            return (0.0, 0.0);
        }
        let w = ((n as f64 * fraction).round() as usize).clamp(1, n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&self.scores[..w]), mean(&self.scores[n - w..]))
    }
}

/// Head output before its final spiking layer (the last batch norm).
pub fn head_potential(g: &mut Graph<'_>, x: Var, prefix: &str, spec: &MixerSpec) -> Result<Var> {
    require_binary(g, x)?;
    let (n, dim) = token_dims(g.tape.shape(x))?;
    let axis = g.tape.shape(x).len() - 1;
    match spec.kind {
        MixerKind::Ssa => {
            spec.validate(dim)?;
            let mut qkv = [x; 3];
            for (slot, p) in qkv.iter_mut().zip(["q", "k", "v"]) {
                let proj = g.linear(x, &format!("{prefix}.{p}"))?;
                let normed = g.batch_norm(proj, &format!("{prefix}.{p}_bn"), axis)?;
                *slot = g.sn(normed)?;
            }
            let [q, k, v] = qkv;
            g.trace(&format!("{prefix}.qkv"), LayerKind::Fc, fc_flops(dim, 3 * dim, n), &[x]);
            g.trace(
                &format!("{prefix}.attn"),
                LayerKind::Mixer,
                2 * attention_macs(spec, n, dim),
                &[q, k, v],
            );
            if g.records.ortho.is_some() {
                let score = head_orthogonality(g.tape.value(q), g.tape.value(k), spec.heads)?;
                if let Some(o) = g.records.ortho.as_mut() {
                    o.push((prefix.to_string(), score));
                }
            }
            let mixed = attention(&mut g.tape, q, k, v, spec.heads, spec.scale, spec.mult_order)?;
            let attn = g.sn(mixed)?;
            g.trace(&format!("{prefix}.o"), LayerKind::Fc, fc_flops(dim, dim, n), &[attn]);
            let out = g.linear(attn, &format!("{prefix}.o"))?;
            g.batch_norm(out, &format!("{prefix}.o_bn"), axis)
        }
        MixerKind::WtCombined => {
            g.trace(prefix, LayerKind::Mixer, 2 * count_ops(spec, n, dim), &[x]);
            let mut acc: Option<Var> = None;
            for (kind, c) in COMBINED_BASES.iter().zip(COMBINED_COEFFS) {
                let coef = g.param(&format!("{prefix}.{c}"))?;
                let mixed = g.tape.mix(x, &Mixer::Wavelet2d(WaveletBasis::new(*kind)))?;
                let term = g.tape.scale_by(mixed, coef)?;
                acc = Some(match acc {
                    Some(a) => g.tape.add(a, term)?,
                    None => term,
                });
            }
            g.batch_norm(acc.expect("three bases"), &format!("{prefix}.bn"), axis)
        }
        _ => {
            let mixer = spec.fixed_mixer().expect("fixed transform head");
            g.trace(prefix, LayerKind::Mixer, 2 * count_ops(spec, n, dim), &[x]);
            let mixed = g.tape.mix(x, &mixer)?;
            g.batch_norm(mixed, &format!("{prefix}.bn"), axis)
        }
    }
}

/// `SN(BN(Dense(SN(Q·Kᵀ·V·s))))` with `Q, K, V = SN(BN(X·W))`.
pub fn ssa_head(g: &mut Graph<'_>, x: Var, prefix: &str, spec: &MixerSpec) -> Result<Var> {
    if spec.kind != MixerKind::Ssa {
        return Err(Error::Config(format!("ssa_head called with a {} spec", spec.kind)));
    }
    let u = head_potential(g, x, prefix, spec)?;
    g.sn(u)
}

/// `SN(BN(FW(X)))` for a Fourier, wavelet or combined-wavelet spec.
pub fn fw_head(g: &mut Graph<'_>, x: Var, prefix: &str, spec: &MixerSpec) -> Result<Var> {
    if spec.kind == MixerKind::Ssa {
        return Err(Error::Config("fw_head called with an attention spec".into()));
    }
    let u = head_potential(g, x, prefix, spec)?;
    g.sn(u)
}

/// Dispatches to [`ssa_head`] or [`fw_head`].
pub fn head(g: &mut Graph<'_>, x: Var, prefix: &str, spec: &MixerSpec) -> Result<Var> {
    let u = head_potential(g, x, prefix, spec)?;
    g.sn(u)
}
