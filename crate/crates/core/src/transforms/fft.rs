//! Radix-2 decimation-in-time Cooley–Tukey FFT and the naive DFT it is checked against.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernels::flops;

/// FLOPs charged per radix-2 butterfly: one complex multiply plus two complex adds.
pub const BUTTERFLY_FLOPS: u64 = 10;

/// `X[n] = Σ_k x[k]·exp(−2πi·kn/N)` by direct double loop.
pub fn dft_naive(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|freq| {
            x.iter()
                .enumerate()
                .map(|(k, &v)| {
                    // reduce k·freq mod n first so the angle stays small and exact
                    let angle = -2.0 * PI * ((k * freq) % n) as f64 / n as f64;
                    v * Complex64::from_polar(1.0, angle)
                })
                .sum()
        })
        .collect()
}

pub fn is_power_of_two(n: usize) -> bool {
    n >= 1 && n.is_power_of_two()
}

/// Butterflies performed by a length-`n` radix-2 transform: `(n/2)·log₂n`.
pub fn butterfly_count(n: usize) -> u64 {
    if n < 2 {
        return 0;
    }
    (n as u64 / 2) * n.trailing_zeros() as u64
}

/// Precomputed twiddles and bit-reversal table for one transform length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    len: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl FftPlan {
    pub fn new(len: usize) -> Result<Self> {
        if !is_power_of_two(len) {
            return Err(Error::contract(format!(
                "FFT length {len} is not a power of two; pad first"
            )));
        }
        let bits = len.trailing_zeros();
        let bitrev = (0..len)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..len / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / len as f64))
            .collect();
        Ok(FftPlan {
            len,
            twiddles,
            bitrev,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Forward transform in place, unnormalised.
    pub fn forward(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.len, "buffer length does not match plan");
        let n = self.len;
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut half = 1;
        while half < n {
            let step = n / (2 * half);
            for start in (0..n).step_by(2 * half) {
                for k in 0..half {
                    let t = self.twiddles[k * step] * buf[start + k + half];
                    let u = buf[start + k];
                    buf[start + k] = u + t;
                    buf[start + k + half] = u - t;
                }
            }
            half *= 2;
        }
        flops::add(BUTTERFLY_FLOPS * butterfly_count(n));
    }

    /// Inverse transform in place: conjugate, forward, conjugate, scale by `1/N`.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        buf.iter_mut().for_each(|v| *v = v.conj());
        self.forward(buf);
        let scale = 1.0 / self.len as f64;
        buf.iter_mut().for_each(|v| *v = v.conj() * scale);
    }
}

pub fn fft(x: &[Complex64], inverse: bool) -> Result<Vec<Complex64>> {
    let plan = FftPlan::new(x.len())?;
    let mut buf = x.to_vec();
    if inverse {
        plan.inverse(&mut buf);
    } else {
        plan.forward(&mut buf);
    }
    Ok(buf)
}
