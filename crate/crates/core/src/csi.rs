//! Channel interference mitigation on raw CSI frames.
//!
//! A frame goes through three stages, in order:
//!
//! 1. phase unwrapping across the 52 occupied subcarriers,
//! 2. jitter detection on the unwrapped phase gradient and repair by linear
//!    interpolation (frames with more than `max_jitters` jitters are
//!    discarded untouched),
//! 3. cyclic-shift division `h~_k = h_k / h_{k-1}`, `h~_1 = h_1 / h_2`, which
//!    cancels any channel component shared by neighbouring subcarriers.
//!
//! Subcarrier order is ascending `-26..=-1, 1..=26` with DC excluded.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{self, DEFAULT_EPS_FACTOR};
use crate::NUM_SUBCARRIERS;

/// One frame of per-subcarrier channel estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiMeasurement {
    pub h: Vec<Complex64>,
    pub device_id: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl CsiMeasurement {
    pub fn new(h: Vec<Complex64>, device_id: u32) -> Result<Self> {
        if h.len() != NUM_SUBCARRIERS {
            return Err(Error::invalid(format!(
                "CSI frame must have {NUM_SUBCARRIERS} subcarriers, got {}",
                h.len()
            )));
        }
        signal::ensure_finite(&h, "CSI frame")?;
        Ok(Self {
            h,
            device_id,
            meta: BTreeMap::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum DiscardReason {
    TooManyJitters { count: usize, max: usize },
    NearZeroDenominator { index: usize },
}

impl std::fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DiscardReason::TooManyJitters { count, max } => {
                write!(f, "{count} phase jitters exceed the limit of {max}")
            }
            DiscardReason::NearZeroDenominator { index } => {
                write!(f, "near-zero subcarrier used as divisor at index {index}")
            }
        }
    }
}

/// Output of the mitigation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedCsi {
    pub h_tilde: Vec<Complex64>,
    pub jitter_count: usize,
    pub discarded: bool,
    pub discard_reason: Option<DiscardReason>,
    pub device_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub max_jitters: usize,
    /// Division guard as a fraction of the frame RMS magnitude.
    pub eps_factor: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_jitters: 5,
            eps_factor: DEFAULT_EPS_FACTOR,
        }
    }
}

/// Removes 2π jumps so that consecutive differences lie in `(-π, π]`.
///
/// The first sample is kept; every later sample is shifted by an integer
/// multiple of 2π.
pub fn unwrap_phases(phases: &[f64]) -> Result<Vec<f64>> {
    if phases.is_empty() {
        return Err(Error::invalid("cannot unwrap an empty phase sequence"));
    }
    if phases.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("non-finite phase"));
    }
    let mut out = Vec::with_capacity(phases.len());
    out.push(phases[0]);
    let mut turns: i64 = 0;
    for w in phases.windows(2) {
        let d = w[1] - w[0];
        turns += ((PI - d) / (2.0 * PI)).floor() as i64;
        out.push(w[1] + 2.0 * PI * turns as f64);
    }
    Ok(out)
}

/// Indices whose phase gradient runs against both neighbouring gradients.
///
/// With `g_i = phi[i] - phi[i-1]`, index `i` (1 ≤ i ≤ n-2) is a jitter when
/// `g_i` has the opposite sign of `g_{i+1}` and, where it exists, of
/// `g_{i-1}`. At `i = 1` there is no `g_0`, so the flip must instead be
/// confirmed by `g_2` and `g_3` agreeing.
pub fn detect_jitters(unwrapped: &[f64]) -> Vec<usize> {
    let n = unwrapped.len();
    if n < 3 {
        return Vec::new();
    }
    // grad[i] = phi[i+1] - phi[i], i.e. the gradient into index i+1.
    let grad: Vec<f64> = unwrapped.windows(2).map(|w| w[1] - w[0]).collect();
    let opposite = |a: f64, b: f64| a * b < 0.0;
    let mut out = Vec::new();
    for i in 1..n - 1 {
        let into = grad[i - 1];
        let out_of = grad[i];
        if !opposite(into, out_of) {
            continue;
        }
        let confirmed = if i >= 2 {
            opposite(grad[i - 2], into)
        } else {
            grad.get(i + 1).is_some_and(|&next| !opposite(out_of, next))
        };
        if confirmed {
            out.push(i);
        }
    }
    out
}

/// Replaces the phase at each jitter index by linear interpolation between
/// the nearest non-jitter neighbours. Jitters with a neighbour on one side
/// only copy that neighbour.
pub fn repair_phases(unwrapped: &[f64], jitters: &[usize]) -> Vec<f64> {
    let n = unwrapped.len();
    let mut is_jitter = vec![false; n];
    for &j in jitters {
        if j < n {
            is_jitter[j] = true;
        }
    }
    let mut out = unwrapped.to_vec();
    for &j in jitters {
        if j >= n {
            continue;
        }
        let left = (0..j).rev().find(|&k| !is_jitter[k]);
        let right = (j + 1..n).find(|&k| !is_jitter[k]);
        out[j] = match (left, right) {
            (Some(a), Some(b)) => {
                let frac = (j - a) as f64 / (b - a) as f64;
                unwrapped[a] + (unwrapped[b] - unwrapped[a]) * frac
            }
            (Some(a), None) => unwrapped[a],
            (None, Some(b)) => unwrapped[b],
            (None, None) => unwrapped[j],
        };
    }
    out
}

/// Result of the jitter stage on a complex frame of any length.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterCorrection {
    pub h: Vec<Complex64>,
    pub jitters: Vec<usize>,
    pub discarded: bool,
}

impl JitterCorrection {
    pub fn jitter_count(&self) -> usize {
        self.jitters.len()
    }
}

/// Detects and repairs phase jitters in a complex frame.
///
/// Amplitudes are preserved; repaired entries are rebuilt as
/// `|h_k| exp(j phi_k)`, other entries are returned unchanged. A frame with
/// more than `max_jitters` jitters comes back untouched and flagged.
pub fn correct_jitter_values(h: &[Complex64], max_jitters: usize) -> Result<JitterCorrection> {
    let phases: Vec<f64> = h.iter().map(|s| s.arg()).collect();
    let unwrapped = unwrap_phases(&phases)?;
    let jitters = detect_jitters(&unwrapped);
    if jitters.len() > max_jitters {
        return Ok(JitterCorrection {
            h: h.to_vec(),
            jitters,
            discarded: true,
        });
    }
    let repaired = repair_phases(&unwrapped, &jitters);
    let mut out = h.to_vec();
    for &j in &jitters {
        out[j] = Complex64::from_polar(h[j].norm(), repaired[j]);
    }
    Ok(JitterCorrection {
        h: out,
        jitters,
        discarded: false,
    })
}

/// Jitter stage on a validated CSI frame.
pub fn correct_jitters(csi: &CsiMeasurement, max_jitters: usize) -> Result<JitterCorrection> {
    correct_jitter_values(&csi.h, max_jitters)
}

/// `h~_k = h_k / h_{k-1}` for k ≥ 2 and `h~_1 = h_1 / h_2` (1-based).
///
/// Fails on the first divisor whose magnitude is below `eps`.
pub fn cyclic_shift_division(h: &[Complex64], eps: f64) -> Result<Vec<Complex64>> {
    if h.len() < 2 {
        return Err(Error::invalid("cyclic-shift division needs at least two subcarriers"));
    }
    let divide = |num: Complex64, den_idx: usize| {
        signal::complex_divide(num, h[den_idx], eps).map_err(|e| match e {
            Error::NearZeroDenominator { magnitude, eps, .. } => Error::NearZeroDenominator {
                index: den_idx,
                magnitude,
                eps,
            },
            other => other,
        })
    };
    let mut out = Vec::with_capacity(h.len());
    out.push(divide(h[0], 1)?);
    for k in 1..h.len() {
        out.push(divide(h[k], k - 1)?);
    }
    Ok(out)
}

/// Full mitigation chain: unwrap, jitter repair, cyclic-shift division.
///
/// Discard decisions are reported in the returned value; only malformed
/// input is an error.
pub fn preprocess_frame(csi: &CsiMeasurement, config: &PreprocessConfig) -> Result<ProcessedCsi> {
    if csi.h.len() != NUM_SUBCARRIERS {
        return Err(Error::invalid(format!(
            "CSI frame must have {NUM_SUBCARRIERS} subcarriers, got {}",
            csi.h.len()
        )));
    }
    signal::ensure_finite(&csi.h, "CSI frame")?;
    let corrected = correct_jitters(csi, config.max_jitters)?;
    let jitter_count = corrected.jitter_count();
    if corrected.discarded {
        return Ok(ProcessedCsi {
            h_tilde: csi.h.clone(),
            jitter_count,
            discarded: true,
            discard_reason: Some(DiscardReason::TooManyJitters {
                count: jitter_count,
                max: config.max_jitters,
            }),
            device_id: csi.device_id,
        });
    }
    let eps = config.eps_factor * signal::rms(&corrected.h);
    match cyclic_shift_division(&corrected.h, eps) {
        Ok(h_tilde) => Ok(ProcessedCsi {
            h_tilde,
            jitter_count,
            discarded: false,
            discard_reason: None,
            device_id: csi.device_id,
        }),
        Err(Error::NearZeroDenominator { index, .. }) => Ok(ProcessedCsi {
            h_tilde: csi.h.clone(),
            jitter_count,
            discarded: true,
            discard_reason: Some(DiscardReason::NearZeroDenominator { index }),
            device_id: csi.device_id,
        }),
        Err(e) => Err(e),
    }
}

/// Passes an already-discarded frame through unchanged, otherwise runs
/// [`preprocess_frame`] on its values.
pub fn reprocess(frame: &ProcessedCsi, config: &PreprocessConfig) -> Result<ProcessedCsi> {
    if frame.discarded {
        return Ok(frame.clone());
    }
    let csi = CsiMeasurement::new(frame.h_tilde.clone(), frame.device_id)?;
    preprocess_frame(&csi, config)
}

/// Amplitude and unwrapped phase of a raw frame, with no repair or division.
pub fn amplitude_phase(h: &[Complex64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let amp = h.iter().map(|s| s.norm()).collect();
    let phases: Vec<f64> = h.iter().map(|s| s.arg()).collect();
    Ok((amp, unwrap_phases(&phases)?))
}
