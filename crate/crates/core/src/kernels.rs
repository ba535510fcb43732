//! Raw numeric kernels over row-major slices.
//!
//! These carry no autodiff bookkeeping; the tape wraps them. Inner loops skip
//! zero entries of the left operand, which is where spike sparsity pays off.

use std::cell::Cell;

/// Thread-local FLOP counter. One multiply-accumulate counts as 2 FLOPs.
pub mod flops {
    use super::Cell;

    thread_local! {
        static ENABLED: Cell<bool> = const { Cell::new(false) };
        static COUNT: Cell<u64> = const { Cell::new(0) };
    }

    pub fn enable(on: bool) {
        ENABLED.with(|e| e.set(on));
    }

    pub fn enabled() -> bool {
        ENABLED.with(|e| e.get())
    }

    pub fn reset() {
        COUNT.with(|c| c.set(0));
    }

    pub fn get() -> u64 {
        COUNT.with(|c| c.get())
    }

    pub fn add(n: u64) {
        if enabled() {
            COUNT.with(|c| c.set(c.get() + n));
        }
    }

    /// Runs `f` with counting on and returns its result with the FLOPs it used.
    pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
        let was = enabled();
        let before = get();
        enable(true);
        let out = f();
        let used = get() - before;
        enable(was);
        (out, used)
    }
}

/// `C[m×p] = A[m×k] · B[k×p]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    matmul_into(a, b, &mut c, m, k, p);
    c
}

pub fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    flops::add(2 * (m * k * p) as u64);
    for i in 0..m {
        let row = &mut c[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `dA[m×k] += dC[m×p] · Bᵀ`.
pub fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let drow = &dc[i * p..(i + 1) * p];
        if drow.iter().all(|&v| v == 0.0) {
            continue;
        }
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            da[i * k + kk] += dot(drow, brow);
        }
    }
}

/// `dB[k×p] += Aᵀ · dC[m×p]`.
pub fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let drow = &dc[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[kk * p..(kk + 1) * p];
            for (d, &g) in dbrow.iter_mut().zip(drow) {
                *d += av * g;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Swaps the last two axes of a `[batch, rows, cols]` block.
pub fn transpose_last2(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let src = &x[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

/// General axis permutation: `out` axis `i` is input axis `perm[i]`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a 2D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.out_ch * self.in_ch * self.kernel * self.kernel * self.out_h() * self.out_w())
            as u64
    }

    /// Output coordinate hit by input `i` through kernel tap `ki`, if any.
    #[inline]
    fn out_index(&self, i: usize, ki: usize, out_len: usize) -> Option<usize> {
        let shifted = i + self.padding;
        if shifted < ki {
            return None;
        }
        let d = shifted - ki;
        if !d.is_multiple_of(self.stride) {
            return None;
        }
        let o = d / self.stride;
        (o < out_len).then_some(o)
    }

    /// Weights `[O, C, k, k]` reordered to `[C, k, k, O]`.
    fn weights_channel_last(&self, w: &[f64]) -> Vec<f64> {
        let kk = self.kernel * self.kernel;
        transpose_last2(w, 1, self.out_ch, self.in_ch * kk)
    }
}

/// Cross-correlation, no kernel flip. `x: [B, C, H, W]`, `w: [O, C, k, k]`.
pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, wd, k, o_ch) = (g.height, g.width, g.kernel, g.out_ch);
    flops::add(2 * g.macs());
    let wt = g.weights_channel_last(w);
    let mut out = vec![0.0; g.batch * o_ch * oh * ow];
    let mut acc = vec![0.0; oh * ow * o_ch];
    for b in 0..g.batch {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..g.in_ch {
            let plane = &x[(b * g.in_ch + c) * h * wd..(b * g.in_ch + c + 1) * h * wd];
            for i in 0..h {
                for j in 0..wd {
                    let v = plane[i * wd + j];
                    if v == 0.0 {
                        continue;
                    }
                    for ki in 0..k {
                        let Some(oi) = g.out_index(i, ki, oh) else { continue };
                        for kj in 0..k {
                            let Some(oj) = g.out_index(j, kj, ow) else { continue };
                            let wrow = &wt[((c * k + ki) * k + kj) * o_ch..][..o_ch];
                            let arow = &mut acc[(oi * ow + oj) * o_ch..][..o_ch];
                            for (a, &wv) in arow.iter_mut().zip(wrow) {
                                *a += v * wv;
                            }
                        }
                    }
                }
            }
        }
        let dst = &mut out[b * o_ch * oh * ow..(b + 1) * o_ch * oh * ow];
        for pos in 0..oh * ow {
            for o in 0..o_ch {
                dst[o * oh * ow + pos] = acc[pos * o_ch + o];
            }
        }
    }
    out
}

/// Gradients of [`conv2d`]. `dx` is only computed when requested.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, wd, k, o_ch) = (g.height, g.width, g.kernel, g.out_ch);
    let wt = g.weights_channel_last(w);
    let mut dwt = vec![0.0; wt.len()];
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dy_cl = vec![0.0; oh * ow * o_ch];
    for b in 0..g.batch {
        let src = &dy[b * o_ch * oh * ow..(b + 1) * o_ch * oh * ow];
        for o in 0..o_ch {
            for pos in 0..oh * ow {
                dy_cl[pos * o_ch + o] = src[o * oh * ow + pos];
            }
        }
        for c in 0..g.in_ch {
            let base = (b * g.in_ch + c) * h * wd;
            for i in 0..h {
                for j in 0..wd {
                    let v = x[base + i * wd + j];
                    if v == 0.0 && !want_dx {
                        continue;
                    }
                    let mut gx = 0.0;
                    for ki in 0..k {
                        let Some(oi) = g.out_index(i, ki, oh) else { continue };
                        for kj in 0..k {
                            let Some(oj) = g.out_index(j, kj, ow) else { continue };
                            let off = ((c * k + ki) * k + kj) * o_ch;
                            let grow = &dy_cl[(oi * ow + oj) * o_ch..][..o_ch];
                            if v != 0.0 {
                                for (d, &gv) in dwt[off..off + o_ch].iter_mut().zip(grow) {
                                    *d += v * gv;
                                }
                            }
                            if want_dx {
                                gx += dot(&wt[off..off + o_ch], grow);
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        dx[base + i * wd + j] += gx;
                    }
                }
            }
        }
    }
    let kk = k * k;
    let dw = transpose_last2(&dwt, 1, g.in_ch * kk, o_ch);
    (dx, dw)
}

/// 2×2 max-pool with stride 2 over `[B, C, H, W]`; returns values and argmax offsets.
pub fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
