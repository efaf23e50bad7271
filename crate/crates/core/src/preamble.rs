//! Time-domain sample generation: L-STF + L-LTF synthesis weighted by
//! processed CSI.
//!
//! Each field is `x(t) = w_T(t) * sum_k sym_k * h~_k * exp(j 2 pi m_k df (t - t0))`
//! sampled at `t_n = n / fs` for `n = 0..160`, where `m_k` is the subcarrier
//! index of position `k` and `t0` is zero for the short field and the guard
//! interval for the long one. The two 160-sample fields are concatenated.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::csi::ProcessedCsi;
use crate::error::{Error, Result};
use crate::{NUM_SUBCARRIERS, PREAMBLE_LEN};

/// Occupied subcarrier index for each of the 52 CSI positions.
pub const SUBCARRIER_INDICES: [i32; NUM_SUBCARRIERS] = {
    let mut out = [0i32; NUM_SUBCARRIERS];
    let mut i = 0;
    while i < NUM_SUBCARRIERS {
        out[i] = if i < 26 { i as i32 - 26 } else { i as i32 - 25 };
        i += 1;
    }
    out
};

/// Sign pattern of the short training symbol before the `sqrt(13/6)` scale;
/// each nonzero entry stands for `±(1 + j)`.
const STF_PATTERN: [i8; NUM_SUBCARRIERS] = [
    0, 0, 1, 0, 0, 0, -1, 0, 0, 0, //
    1, 0, 0, 0, -1, 0, 0, 0, -1, 0, 0, 0, //
    1, 0, 0, 0, 0, 0, 0, -1, 0, 0, 0, -1, //
    0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, //
    0, 0, 1, 0, 0,
];

/// Long training symbol over the 52 occupied subcarriers.
pub const LTF_SYMBOL: [i8; NUM_SUBCARRIERS] = [
    1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, //
    -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, -1, -1, //
    1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, //
    -1, -1, 1, -1, 1, -1, 1, 1, 1, 1,
];

/// Training symbols as complex vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSymbols {
    pub short: Vec<Complex64>,
    pub long: Vec<Complex64>,
}

impl TrainingSymbols {
    pub fn legacy() -> Self {
        let scale = (13.0f64 / 6.0).sqrt();
        let short = STF_PATTERN
            .iter()
            .map(|&s| Complex64::new(1.0, 1.0) * (s as f64 * scale))
            .collect();
        let long = LTF_SYMBOL.iter().map(|&l| Complex64::new(l as f64, 0.0)).collect();
        Self { short, long }
    }

    pub fn subcarrier_indices(&self) -> &'static [i32; NUM_SUBCARRIERS] {
        &SUBCARRIER_INDICES
    }
}

/// Timing constants of the 20 MHz legacy preamble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreambleParams {
    /// Subcarrier spacing in Hz.
    pub delta_f: f64,
    /// Field duration in seconds.
    pub field_duration: f64,
    /// Long-training guard interval in seconds.
    pub guard_interval: f64,
    /// Window transition time in seconds.
    pub transition: f64,
    /// Sample rate in samples per second.
    pub sample_rate: f64,
}

impl Default for PreambleParams {
    fn default() -> Self {
        Self {
            delta_f: 312.5e3,
            field_duration: 8e-6,
            guard_interval: 1.6e-6,
            transition: 100e-9,
            sample_rate: 20e6,
        }
    }
}

impl PreambleParams {
    pub fn samples_per_field(&self) -> usize {
        (self.field_duration * self.sample_rate).round() as usize
    }

    pub fn sample_time(&self, n: usize) -> f64 {
        n as f64 / self.sample_rate
    }
}

/// Field window with `sin^2` ramps of width `transition` centred on 0 and T.
///
/// Returns 0 outside `[-T_TR/2, T + T_TR/2)`.
pub fn window(t: f64, params: &PreambleParams) -> f64 {
    let tr = params.transition;
    let big_t = params.field_duration;
    if -tr / 2.0 < t && t < tr / 2.0 {
        (PI / 2.0 * (0.5 + t / tr)).sin().powi(2)
    } else if tr / 2.0 <= t && t < big_t - tr / 2.0 {
        1.0
    } else if big_t - tr / 2.0 <= t && t < big_t + tr / 2.0 {
        (PI / 2.0 * (0.5 - (t - big_t) / tr)).sin().powi(2)
    } else {
        0.0
    }
}

/// Synthesises one 160-sample field.
pub fn synth_field(
    symbols: &[Complex64],
    weights: &[Complex64],
    guard_offset: f64,
    params: &PreambleParams,
) -> Result<Vec<Complex64>> {
    if symbols.len() != NUM_SUBCARRIERS || weights.len() != NUM_SUBCARRIERS {
        return Err(Error::invalid(format!(
            "field synthesis needs {NUM_SUBCARRIERS} symbols and weights, got {} and {}",
            symbols.len(),
            weights.len()
        )));
    }
    let coeffs: Vec<(f64, Complex64)> = SUBCARRIER_INDICES
        .iter()
        .zip(symbols.iter().zip(weights))
        .map(|(&m, (&s, &w))| (m as f64, s * w))
        .filter(|(_, c)| *c != Complex64::new(0.0, 0.0))
        .collect();
    let n_samples = params.samples_per_field();
    let mut out = Vec::with_capacity(n_samples);
    for n in 0..n_samples {
        let t = params.sample_time(n);
        let w = window(t, params);
        if w == 0.0 {
            out.push(Complex64::new(0.0, 0.0));
            continue;
        }
        let phase_step = 2.0 * PI * params.delta_f * (t - guard_offset);
        let acc: Complex64 = coeffs
            .iter()
            .map(|&(m, c)| c * Complex64::from_polar(1.0, phase_step * m))
            .sum();
        out.push(acc * w);
    }
    Ok(out)
}

/// 320-sample preamble-shaped feature vector derived from one CSI frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDomainFeature {
    pub u: Vec<Complex64>,
    pub device_id: u32,
}

/// Precomputed synthesis basis; equivalent to [`synth_field`] for both
/// fields but reuses the complex exponentials across frames.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    params: PreambleParams,
    symbols: TrainingSymbols,
    /// `basis[n][k]`: windowed exponential times training symbol for output sample n.
    basis: Vec<Vec<(usize, Complex64)>>,
}

impl Synthesizer {
    pub fn new(params: PreambleParams) -> Self {
        let symbols = TrainingSymbols::legacy();
        let per_field = params.samples_per_field();
        let mut basis = Vec::with_capacity(2 * per_field);
        for (syms, offset) in [(&symbols.short, 0.0), (&symbols.long, params.guard_interval)] {
            for n in 0..per_field {
                let t = params.sample_time(n);
                let w = window(t, &params);
                let phase_step = 2.0 * PI * params.delta_f * (t - offset);
                let row = syms
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| **s != Complex64::new(0.0, 0.0) && w != 0.0)
                    .map(|(k, &s)| {
                        let m = SUBCARRIER_INDICES[k] as f64;
                        (k, s * Complex64::from_polar(w, phase_step * m))
                    })
                    .collect();
                basis.push(row);
            }
        }
        Self {
            params,
            symbols,
            basis,
        }
    }

    pub fn params(&self) -> &PreambleParams {
        &self.params
    }

    pub fn symbols(&self) -> &TrainingSymbols {
        &self.symbols
    }

    /// Concatenated short and long fields weighted by `weights`.
    pub fn synthesize(&self, weights: &[Complex64]) -> Result<Vec<Complex64>> {
        if weights.len() != NUM_SUBCARRIERS {
            return Err(Error::invalid(format!(
                "expected {NUM_SUBCARRIERS} weights, got {}",
                weights.len()
            )));
        }
        Ok(self
            .basis
            .iter()
            .map(|row| row.iter().map(|&(k, b)| b * weights[k]).sum())
            .collect())
    }

    /// Ideal transmit preamble (all weights one).
    pub fn ideal(&self) -> Vec<Complex64> {
        self.synthesize(&[Complex64::new(1.0, 0.0); NUM_SUBCARRIERS])
            .expect("fixed-length weights")
    }

    pub fn tdsg(&self, processed: &ProcessedCsi) -> Result<TimeDomainFeature> {
        if processed.discarded {
            return Err(Error::Discarded(
                processed
                    .discard_reason
                    .map(|r| r.to_string())
                    .unwrap_or_else(|| "frame flagged as discarded".into()),
            ));
        }
        let u = self.synthesize(&processed.h_tilde)?;
        debug_assert_eq!(u.len(), PREAMBLE_LEN);
        Ok(TimeDomainFeature {
            u,
            device_id: processed.device_id,
        })
    }
}

impl Default for Synthesizer {
    fn default() -> Self {
        Self::new(PreambleParams::default())
    }
}

/// Field-by-field TDSG through [`synth_field`].
pub fn tdsg(processed: &ProcessedCsi, params: &PreambleParams) -> Result<TimeDomainFeature> {
    if processed.discarded {
        return Err(Error::Discarded("frame flagged as discarded".into()));
    }
    let symbols = TrainingSymbols::legacy();
    let mut u = synth_field(&symbols.short, &processed.h_tilde, 0.0, params)?;
    u.extend(synth_field(
        &symbols.long,
        &processed.h_tilde,
        params.guard_interval,
        params,
    )?);
    Ok(TimeDomainFeature {
        u,
        device_id: processed.device_id,
    })
}

/// Ideal preamble built field by field with unit weights.
pub fn ideal_preamble(params: &PreambleParams) -> Vec<Complex64> {
    let ones = ProcessedCsi {
        h_tilde: vec![Complex64::new(1.0, 0.0); NUM_SUBCARRIERS],
        jitter_count: 0,
        discarded: false,
        discard_reason: None,
        device_id: 0,
    };
    tdsg(&ones, params).expect("unit weights are valid").u
}
