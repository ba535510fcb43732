//! Token-mixing transforms over `[.., N, D]` slices (sequence axis `N`, feature axis `D`).
//!
//! Every mixer is a fixed linear operator. Axes whose length is not a power of
//! two are zero-padded up to the next power of two, transformed, and truncated
//! back to their original length.

pub mod fft;
pub mod wavelet;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use fft::{dft_naive, fft, FftPlan};
pub use wavelet::{dwt_full, idwt_full, WaveletBasis, WaveletKind};

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    /// Real part of the DFT along the sequence axis.
    Fourier1d,
    /// Real part of the DFT along the feature axis, then the sequence axis.
    Fourier2d,
    /// Full-depth DWT along the sequence axis.
    Wavelet1d(WaveletBasis),
    /// Full-depth DWT along the feature axis, then the sequence axis.
    Wavelet2d(WaveletBasis),
}

/// Splits a `[.., N, D]` shape into `(batch, N, D)`; rank-1 input is one `N×1` column.
pub fn slice_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        0 => Err(Error::dim("mixer input must have rank >= 1")),
        1 => Ok((1, shape[0], 1)),
        r => Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1])),
    }
}

fn padded(n: usize) -> usize {
    n.next_power_of_two()
}

impl Mixer {
    pub fn apply(&self, x: &[f64], batch: usize, n: usize, d: usize) -> Result<Vec<f64>> {
        self.run(x, batch, n, d, false)
    }

    /// Transpose of [`Mixer::apply`], used for backpropagation.
    pub fn apply_adjoint(&self, g: &[f64], batch: usize, n: usize, d: usize) -> Result<Vec<f64>> {
        self.run(g, batch, n, d, true)
    }

    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = slice_dims(x.shape())?;
        let out = self.apply(x.data(), b, n, d)?;
        Tensor::new(x.shape().to_vec(), out)
    }

    fn run(&self, x: &[f64], batch: usize, n: usize, d: usize, adjoint: bool) -> Result<Vec<f64>> {
        if x.len() != batch * n * d {
            return Err(Error::dim(format!(
                "mixer got {} values for {batch}x{n}x{d}",
                x.len()
            )));
        }
        if n == 0 || d == 0 {
            return Ok(Vec::new());
        }
        match self {
            // Re(F) restricted to the top-left block is symmetric, hence self-adjoint.
            Mixer::Fourier1d => fourier(x, batch, n, d, false),
            Mixer::Fourier2d => fourier(x, batch, n, d, true),
            Mixer::Wavelet1d(b) => {
                let mut y = x.to_vec();
                wavelet_axis(&mut y, batch, n, d, Axis::Sequence, b, adjoint)?;
                Ok(y)
            }
            Mixer::Wavelet2d(b) => {
                let mut y = x.to_vec();
                wavelet_axis(&mut y, batch, n, d, Axis::Feature, b, adjoint)?;
                wavelet_axis(&mut y, batch, n, d, Axis::Sequence, b, adjoint)?;
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Axis {
    Sequence,
    Feature,
}

fn fourier(x: &[f64], batch: usize, n: usize, d: usize, both_axes: bool) -> Result<Vec<f64>> {
    let (np, dp) = (padded(n), if both_axes { padded(d) } else { d });
    let seq_plan = FftPlan::new(np)?;
    let feat_plan = if both_axes { Some(FftPlan::new(dp)?) } else { None };
    let mut out = vec![0.0; x.len()];
    let mut grid = vec![Complex64::new(0.0, 0.0); np * dp];
    let mut col = vec![Complex64::new(0.0, 0.0); np];
    for b in 0..batch {
        let src = &x[b * n * d..(b + 1) * n * d];
        grid.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for i in 0..n {
            for j in 0..d {
                grid[i * dp + j] = Complex64::new(src[i * d + j], 0.0);
            }
        }
        if let Some(plan) = &feat_plan {
            for i in 0..n {
                plan.forward(&mut grid[i * dp..(i + 1) * dp]);
            }
        }
        let dst = &mut out[b * n * d..(b + 1) * n * d];
        for j in 0..d {
            for i in 0..np {
                col[i] = grid[i * dp + j];
            }
            seq_plan.forward(&mut col);
            for i in 0..n {
                dst[i * d + j] = col[i].re;
            }
        }
    }
    Ok(out)
}

fn wavelet_axis(
    y: &mut [f64],
    batch: usize,
    n: usize,
    d: usize,
    axis: Axis,
    basis: &WaveletBasis,
    adjoint: bool,
) -> Result<()> {
    let len = match axis {
        Axis::Sequence => n,
        Axis::Feature => d,
    };
    let mut buf = vec![0.0; padded(len)];
    for b in 0..batch {
        let slab = &mut y[b * n * d..(b + 1) * n * d];
        let lines = match axis {
            Axis::Sequence => d,
            Axis::Feature => n,
        };
        for line in 0..lines {
            let at = |k: usize| match axis {
                Axis::Sequence => k * d + line,
                Axis::Feature => line * d + k,
            };
            buf.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..len {
                buf[k] = slab[at(k)];
            }
            let res = if adjoint {
                dwt_full_adjoint(&buf, basis)?
            } else {
                dwt_full(&buf, basis)?
            };
            for k in 0..len {
                slab[at(k)] = res[k];
            }
        }
    }
    Ok(())
}

/// Transpose of [`dwt_full`] built from the analysis filters, so it is exact
/// for any filter table (for orthonormal bases it coincides with `idwt_full`).
pub fn dwt_full_adjoint(coeffs: &[f64], basis: &WaveletBasis) -> Result<Vec<f64>> {
    if !fft::is_power_of_two(coeffs.len()) {
        return Err(Error::contract("coefficient layout is not dyadic"));
    }
    let mut current = vec![coeffs[0]];
    while current.len() < coeffs.len() {
        let half = current.len();
        let n = 2 * half;
        let detail = &coeffs[half..n];
        let mut x = vec![0.0; n];
        for k in 0..half {
            for (m, (&lo, &hi)) in basis
                .decomposition_lowpass
                .iter()
                .zip(&basis.decomposition_highpass)
                .enumerate()
            {
                x[(2 * k + m) % n] += lo * current[k] + hi * detail[k];
            }
        }
        current = x;
    }
    Ok(current)
}

pub fn fourier_mix_1d(x: &Tensor) -> Result<Tensor> {
    Mixer::Fourier1d.apply_tensor(x)
}

pub fn fourier_mix_2d(x: &Tensor) -> Result<Tensor> {
    Mixer::Fourier2d.apply_tensor(x)
}

pub fn wavelet_mix_1d(x: &Tensor, basis: &WaveletBasis) -> Result<Tensor> {
    Mixer::Wavelet1d(basis.clone()).apply_tensor(x)
}

pub fn wavelet_mix_2d(x: &Tensor, basis: &WaveletBasis) -> Result<Tensor> {
    Mixer::Wavelet2d(basis.clone()).apply_tensor(x)
}

/// Learnable combination `a·Base1 + b·Base2 + c·Base3` of three 2D wavelet mixers.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedBasis {
    pub bases: [WaveletBasis; 3],
    pub coeffs: [f64; 3],
}

impl Default for CombinedBasis {
    fn default() -> Self {
        CombinedBasis {
            bases: [
                WaveletBasis::new(WaveletKind::Bior11),
                WaveletBasis::new(WaveletKind::Haar),
                WaveletBasis::new(WaveletKind::Db1),
            ],
            coeffs: [1.0 / 3.0; 3],
        }
    }
}

impl CombinedBasis {
    pub fn mixers(&self) -> [Mixer; 3] {
        self.bases.clone().map(Mixer::Wavelet2d)
    }
}

pub fn combined_mix(x: &Tensor, cb: &CombinedBasis) -> Result<Tensor> {
    let mut out = vec![0.0; x.len()];
    for (mixer, &c) in cb.mixers().iter().zip(&cb.coeffs) {
        let y = mixer.apply_tensor(x)?;
        out.iter_mut().zip(y.data()).for_each(|(o, v)| *o += c * v);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Materialises a linear length-`n` transform as an `n×n` matrix by applying it
/// to every standard basis vector (column `k` is the image of `e_k`).
pub fn basis_matrix(transform: impl Fn(&Tensor) -> Result<Tensor>, n: usize) -> Result<Tensor> {
    if !fft::is_power_of_two(n) {
        return Err(Error::contract(format!("basis matrix size {n} is not a power of two")));
    }
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let mut e = Tensor::zeros(&[n, 1]);
        e.data_mut()[k] = 1.0;
        let col = transform(&e)?;
        if col.len() != n {
            return Err(Error::dim("transform changed the vector length"));
        }
        for (i, &v) in col.data().iter().enumerate() {
            m[i * n + k] = v;
        }
    }
    Tensor::new(vec![n, n], m)
}
