//! Complex-sample helpers shared by every stage of the pipeline.
//!
//! Samples are `Complex64`; vectors are plain slices. Lengths are checked at
//! the stage boundaries that care about them (52 for CSI, 64 per OFDM
//! symbol, 320 for a preamble) rather than encoded in the type.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative factor applied to a frame's RMS magnitude to obtain the division guard.
pub const DEFAULT_EPS_FACTOR: f64 = 1e-9;

/// Rejects vectors containing NaN or infinite components.
pub fn ensure_finite(x: &[Complex64], what: &str) -> Result<()> {
    match x.iter().position(|s| !s.re.is_finite() || !s.im.is_finite()) {
        Some(i) => Err(Error::invalid(format!("{what}: non-finite sample at index {i}"))),
        None => Ok(()),
    }
}

/// Root-mean-square magnitude, `sqrt(mean |x|^2)`. Zero for an empty slice.
pub fn rms(x: &[Complex64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|s| s.norm_sqr()).sum::<f64>() / x.len() as f64).sqrt()
}

/// Mean power `mean |x|^2`.
pub fn mean_power(x: &[Complex64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|s| s.norm_sqr()).sum::<f64>() / x.len() as f64
}

/// Division guard for a frame: `DEFAULT_EPS_FACTOR` times its RMS magnitude.
pub fn frame_eps(x: &[Complex64]) -> f64 {
    DEFAULT_EPS_FACTOR * rms(x)
}

/// Discrete Fourier transform of arbitrary length.
///
/// Forward: `X[m] = sum_k x[k] exp(-j 2 pi k m / n)`. The inverse uses the
/// conjugate kernel and scales by `1/n`. Direct evaluation; the twiddle
/// index is reduced modulo `n` before taking sin/cos so large products do
/// not lose precision.
pub fn dft(x: &[Complex64], inverse: bool) -> Result<Vec<Complex64>> {
    let n = x.len();
    if n == 0 {
        return Err(Error::invalid("dft of empty vector"));
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let twiddles: Vec<Complex64> = (0..n)
        .map(|i| Complex64::from_polar(1.0, sign * 2.0 * PI * i as f64 / n as f64))
        .collect();
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, &xk) in x.iter().enumerate() {
            acc += xk * twiddles[(k * m) % n];
        }
        out.push(acc);
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for v in &mut out {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Single DFT bin `sum_k x[k] exp(-j 2 pi k bin / n)` with `bin` taken modulo `n`.
pub fn dft_bin(x: &[Complex64], bin: i64) -> Complex64 {
    let n = x.len() as i64;
    let b = bin.rem_euclid(n);
    x.iter()
        .enumerate()
        .map(|(k, &xk)| {
            let idx = (k as i64 * b) % n;
            xk * Complex64::from_polar(1.0, -2.0 * PI * idx as f64 / n as f64)
        })
        .sum()
}

/// Guarded complex division `a * conj(b) / |b|^2`.
///
/// Fails with [`Error::NearZeroDenominator`] when `|b| < eps`; the caller
/// decides what to do with the frame.
pub fn complex_divide(a: Complex64, b: Complex64, eps: f64) -> Result<Complex64> {
    let mag = b.norm();
    if !(mag >= eps) || mag == 0.0 {
        return Err(Error::NearZeroDenominator {
            index: 0,
            magnitude: mag,
            eps,
        });
    }
    Ok(a * b.conj() / b.norm_sqr())
}
