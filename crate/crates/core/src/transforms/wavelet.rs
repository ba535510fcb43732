//! Dyadic discrete wavelet transform with periodic extension.
//!
//! Analysis of one level:
//!
//! ```text
//! approx[k] = Σ_m lo[m]·x[(2k+m) mod n]     detail[k] = Σ_m hi[m]·x[(2k+m) mod n]
//! ```
//!
//! Synthesis scatters `approx[k]·rec_lo[m] + detail[k]·rec_hi[m]` back into
//! `x[(2k+m) mod n]`. Filter tables below are the published PyWavelets tables;
//! analysis filters are stored reversed from that convolution form so that
//! the loops above are plain correlations.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::flops;

use super::fft::is_power_of_two;

const S: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WaveletKind {
    Haar,
    Db1,
    Bior11,
    Rbio11,
}

impl WaveletKind {
    pub const ALL: [WaveletKind; 4] = [
        WaveletKind::Haar,
        WaveletKind::Db1,
        WaveletKind::Bior11,
        WaveletKind::Rbio11,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WaveletKind::Haar => "haar",
            WaveletKind::Db1 => "db1",
            WaveletKind::Bior11 => "bior11",
            WaveletKind::Rbio11 => "rbio11",
        }
    }
}

impl fmt::Display for WaveletKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WaveletKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('.', "").as_str() {
            "haar" => Ok(WaveletKind::Haar),
            "db1" => Ok(WaveletKind::Db1),
            "bior11" => Ok(WaveletKind::Bior11),
            "rbio11" => Ok(WaveletKind::Rbio11),
            other => Err(Error::Config(format!("unknown wavelet basis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBasis {
    pub kind: WaveletKind,
    pub decomposition_lowpass: Vec<f64>,
    pub decomposition_highpass: Vec<f64>,
    pub reconstruction_lowpass: Vec<f64>,
    pub reconstruction_highpass: Vec<f64>,
}

impl WaveletBasis {
    pub fn new(kind: WaveletKind) -> Self {
        // (dec_lo, dec_hi, rec_lo, rec_hi) in PyWavelets' convolution form.
        // At order 1 the biorthogonal pairs collapse onto Haar.
        let (dec_lo, dec_hi, rec_lo, rec_hi): ([f64; 2], [f64; 2], [f64; 2], [f64; 2]) = match kind {
            WaveletKind::Haar | WaveletKind::Db1 => ([S, S], [-S, S], [S, S], [S, -S]),
            WaveletKind::Bior11 => ([S, S], [-S, S], [S, S], [S, -S]),
            WaveletKind::Rbio11 => ([S, S], [-S, S], [S, S], [S, -S]),
        };
        let rev = |f: [f64; 2]| f.iter().rev().copied().collect::<Vec<_>>();
        WaveletBasis {
            kind,
            decomposition_lowpass: rev(dec_lo),
            decomposition_highpass: rev(dec_hi),
            reconstruction_lowpass: rec_lo.to_vec(),
            reconstruction_highpass: rec_hi.to_vec(),
        }
    }

    pub fn haar() -> Self {
        Self::new(WaveletKind::Haar)
    }

    pub fn filter_len(&self) -> usize {
        self.decomposition_lowpass.len()
    }

    /// Whether highpass is the quadrature mirror `g[m] = (−1)^m·h[L−1−m]` of lowpass.
    pub fn is_quadrature_mirror(&self) -> bool {
        let h = &self.decomposition_lowpass;
        let g = &self.decomposition_highpass;
        let l = h.len();
        g.len() == l
            && (0..l).all(|m| {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                (g[m] - sign * h[l - 1 - m]).abs() < 1e-15
            })
    }

    /// One analysis level on an even-length signal.
    pub fn analyze(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len();
        debug_assert!(n >= 2 && n.is_multiple_of(2));
        let half = n / 2;
        let mut approx = vec![0.0; half];
        let mut detail = vec![0.0; half];
        for k in 0..half {
            for (m, (&lo, &hi)) in self
                .decomposition_lowpass
                .iter()
                .zip(&self.decomposition_highpass)
                .enumerate()
            {
                let v = x[(2 * k + m) % n];
                approx[k] += lo * v;
                detail[k] += hi * v;
            }
        }
        flops::add(4 * (half * self.filter_len()) as u64);
        (approx, detail)
    }

    /// One synthesis level; inverse of [`WaveletBasis::analyze`].
    pub fn synthesize(&self, approx: &[f64], detail: &[f64]) -> Vec<f64> {
        let half = approx.len();
        let n = 2 * half;
        let mut x = vec![0.0; n];
        for k in 0..half {
            for (m, (&lo, &hi)) in self
                .reconstruction_lowpass
                .iter()
                .zip(&self.reconstruction_highpass)
                .enumerate()
            {
                x[(2 * k + m) % n] += lo * approx[k] + hi * detail[k];
            }
        }
        flops::add(4 * (half * self.filter_len()) as u64);
        x
    }
}

fn check_len(n: usize) -> Result<()> {
    if n < 1 || !is_power_of_two(n) {
        return Err(Error::contract(format!(
            "wavelet length {n} is not a power of two; pad first"
        )));
    }
    Ok(())
}

/// Full-depth decomposition into `[approx | detail(1) | detail(2) | … | detail(N/2)]`.
pub fn dwt_full(x: &[f64], basis: &WaveletBasis) -> Result<Vec<f64>> {
    check_len(x.len())?;
    let mut out = vec![0.0; x.len()];
    let mut current = x.to_vec();
    while current.len() > 1 {
        let (approx, detail) = basis.analyze(&current);
        let half = detail.len();
        out[half..2 * half].copy_from_slice(&detail);
        current = approx;
    }
    out[0] = current[0];
    Ok(out)
}

/// Inverse of [`dwt_full`].
pub fn idwt_full(coeffs: &[f64], basis: &WaveletBasis) -> Result<Vec<f64>> {
    check_len(coeffs.len())
        .map_err(|_| Error::contract(format!("coefficient layout of length {} is not dyadic", coeffs.len())))?;
    let mut current = vec![coeffs[0]];
    while current.len() < coeffs.len() {
        let half = current.len();
        current = basis.synthesize(&current, &coeffs[half..2 * half]);
    }
    Ok(current)
}
