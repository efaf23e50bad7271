//! CSI-to-IQ device fingerprinting.
//!
//! The crate turns per-frame WiFi channel-state measurements into
//! preamble-shaped time-domain vectors, trains a fingerprint classifier that
//! borrows representation knowledge from an IQ-trained extractor, and
//! recognises unregistered transmitters with Weibull-calibrated outputs.
//!
//! Module map:
//!
//! - [`signal`]: complex sample helpers, DFT, guarded division.
//! - [`csi`]: phase unwrapping, jitter repair, cyclic-shift division.
//! - [`preamble`]: L-STF/L-LTF synthesis from processed CSI.
//! - [`sim`]: transmitter impairments, multipath, CSI estimation, datasets.
//! - [`neural`]: small reverse-mode training engine and model components.
//! - [`train`]: source pretraining and auxiliary target training.
//! - [`openmax`]: Weibull tail fitting and open-set calibration.
//! - [`eval`]: metrics, ablation ladder, open-world runner.
//! - [`container`]: binary dataset containers, manifests, CSV import/export.

pub mod container;
pub mod csi;
pub mod error;
pub mod eval;
pub mod neural;
pub mod openmax;
pub mod preamble;
pub mod signal;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Number of occupied subcarriers in a 20 MHz legacy OFDM symbol.
pub const NUM_SUBCARRIERS: usize = 52;
/// Samples in the L-STF + L-LTF preamble at 20 Msps.
pub const PREAMBLE_LEN: usize = 320;
/// OFDM FFT size at 20 MHz.
pub const FFT_SIZE: usize = 64;
