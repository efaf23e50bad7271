//! Transmitter and channel simulator producing paired IQ and CSI datasets.
//!
//! Every device owns a fixed [`DeviceProfile`] of hardware impairments:
//! transmit IQ imbalance, carrier frequency offset, a Rapp power amplifier
//! and a DC offset. Each frame sends the ideal legacy preamble through those
//! impairments, a multipath channel and AWGN; the receiver keeps the
//! post-channel IQ samples and a CSI estimate taken from the L-LTF.
//!
//! Randomness is derived from `(master_seed, device_id, frame_index)` so a
//! frame can be regenerated in isolation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{DatasetKind, Manifest};
use crate::csi::CsiMeasurement;
use crate::error::{Error, Result};
use crate::preamble::{Synthesizer, LTF_SYMBOL, SUBCARRIER_INDICES};
use crate::signal;
use crate::{FFT_SIZE, PREAMBLE_LEN};

/// Carrier frequency used to convert ppm offsets to Hz (channel 11).
pub const CARRIER_HZ: f64 = 2.462e9;
pub const SAMPLE_RATE: f64 = 20e6;

const TAG_PROFILE: u64 = 0x5052_4f46;
const TAG_FRAME: u64 = 0x4652_414d;
const TAG_CHANNEL: u64 = 0x4348_414e;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable seed for a `(master, tag, a, b)` tuple.
pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(mix(master) ^ tag) ^ a) ^ b)
}

/// Per-device impairment parameters.
///
/// `pa_vsat` and `dc_offset` are relative to the RMS magnitude of the
/// waveform being transmitted. `pa_vsat = +inf` disables the amplifier model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: u32,
    pub cfo_ppm: f64,
    pub iq_gain_db: f64,
    pub iq_phase_deg: f64,
    pub pa_vsat: f64,
    pub pa_smoothness: f64,
    pub dc_offset: Complex64,
}

impl DeviceProfile {
    /// Impairment-free transmitter.
    pub fn ideal(device_id: u32) -> Self {
        Self {
            device_id,
            cfo_ppm: 0.0,
            iq_gain_db: 0.0,
            iq_phase_deg: 0.0,
            pa_vsat: f64::INFINITY,
            pa_smoothness: 1.0,
            dc_offset: Complex64::new(0.0, 0.0),
        }
    }

    pub fn cfo_hz(&self) -> f64 {
        self.cfo_ppm * 1e-6 * CARRIER_HZ
    }
}

/// Closed interval `[lo, hi]`; `lo == hi` pins the value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentRanges {
    pub cfo_ppm: Range,
    pub iq_gain_db: Range,
    pub iq_phase_deg: Range,
    pub pa_vsat: Range,
    pub pa_smoothness: Range,
    pub dc_offset_max: f64,
}

impl Default for ImpairmentRanges {
    fn default() -> Self {
        Self {
            cfo_ppm: Range::new(-20.0, 20.0),
            iq_gain_db: Range::new(-0.5, 0.5),
            iq_phase_deg: Range::new(-3.0, 3.0),
            pa_vsat: Range::new(1.5, 4.0),
            pa_smoothness: Range::new(1.0, 3.0),
            dc_offset_max: 0.01,
        }
    }
}

impl ImpairmentRanges {
    /// Every device gets the same (nominal) hardware.
    pub fn identical() -> Self {
        Self {
            cfo_ppm: Range::new(0.0, 0.0),
            iq_gain_db: Range::new(0.0, 0.0),
            iq_phase_deg: Range::new(0.0, 0.0),
            pa_vsat: Range::new(3.0, 3.0),
            pa_smoothness: Range::new(2.0, 2.0),
            dc_offset_max: 0.0,
        }
    }
}

/// Deterministic profile draw for `(master_seed, device_id)`.
pub fn sample_profile(master_seed: u64, device_id: u32, ranges: &ImpairmentRanges) -> DeviceProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, TAG_PROFILE, device_id as u64, 0));
    let cfo_ppm = ranges.cfo_ppm.sample(&mut rng);
    let iq_gain_db = ranges.iq_gain_db.sample(&mut rng);
    let iq_phase_deg = ranges.iq_phase_deg.sample(&mut rng);
    let pa_vsat = ranges.pa_vsat.sample(&mut rng);
    let pa_smoothness = ranges.pa_smoothness.sample(&mut rng);
    let dc_mag = ranges.dc_offset_max * rng.random::<f64>();
    let dc_phase = 2.0 * PI * rng.random::<f64>();
    DeviceProfile {
        device_id,
        cfo_ppm,
        iq_gain_db,
        iq_phase_deg,
        pa_vsat,
        pa_smoothness,
        dc_offset: Complex64::from_polar(dc_mag, dc_phase),
    }
}

/// Transmit chain: IQ imbalance, CFO rotation, Rapp AM/AM, DC offset.
pub fn apply_impairments(x: &[Complex64], profile: &DeviceProfile, sample_rate: f64) -> Vec<Complex64> {
    let g_i = 10f64.powf(profile.iq_gain_db / 40.0);
    let g_q = 10f64.powf(-profile.iq_gain_db / 40.0);
    let (sin_phi, cos_phi) = profile.iq_phase_deg.to_radians().sin_cos();
    let f_off = profile.cfo_hz();
    let ref_rms = signal::rms(x);
    let vsat = profile.pa_vsat * ref_rms;
    let two_p = 2.0 * profile.pa_smoothness;
    let dc = profile.dc_offset * ref_rms;

    x.iter()
        .enumerate()
        .map(|(n, &s)| {
            let mut y = Complex64::new(g_i * s.re, g_q * (s.im * cos_phi + s.re * sin_phi));
            if f_off != 0.0 {
                let t = n as f64 / sample_rate;
                y *= Complex64::from_polar(1.0, 2.0 * PI * f_off * t);
            }
            if vsat.is_finite() {
                let mag = y.norm();
                if mag > 0.0 {
                    let gain = 1.0 / (1.0 + (mag / vsat).powf(two_p)).powf(1.0 / two_p);
                    y *= gain;
                }
            }
            y + dc
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coherence {
    /// Fresh taps for every frame (moving transmitter).
    PerFrame,
    /// One tap set per device, reused across its frames (static capture).
    PerDevice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub num_taps: usize,
    pub decay_db_per_tap: f64,
    pub coherence: Coherence,
    /// Bulk arrival delay in samples, drawn uniformly from `[min, max]`.
    #[serde(default = "default_delay")]
    pub delay_samples: (usize, usize),
}

fn default_delay() -> (usize, usize) {
    (8, 8)
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            num_taps: 4,
            decay_db_per_tap: 3.0,
            coherence: Coherence::PerFrame,
            delay_samples: default_delay(),
        }
    }
}

/// Tapped delay line at the sample rate, normalised to unit energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub taps: Vec<Complex64>,
    /// Samples before the first tap.
    #[serde(default)]
    pub delay: usize,
    /// `f64::INFINITY` disables noise.
    pub snr_db: f64,
}

impl ChannelRealization {
    pub fn identity(snr_db: f64) -> Self {
        Self {
            taps: vec![Complex64::new(1.0, 0.0)],
            delay: 0,
            snr_db,
        }
    }

    /// Rayleigh taps with an exponential power-delay profile.
    pub fn draw<R: Rng>(rng: &mut R, config: &ChannelConfig, snr_db: f64) -> Self {
        let n = config.num_taps.max(1);
        let mut taps: Vec<Complex64> = (0..n)
            .map(|i| {
                let power = 10f64.powf(-config.decay_db_per_tap * i as f64 / 10.0);
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re, im) * (power / 2.0).sqrt()
            })
            .collect();
        let energy: f64 = taps.iter().map(|t| t.norm_sqr()).sum();
        let norm = energy.sqrt();
        for t in &mut taps {
            *t /= norm;
        }
        let (lo, hi) = config.delay_samples;
        let delay = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self { taps, delay, snr_db }
    }

    /// Frequency response at subcarrier index `m` (FFT size 64).
    pub fn response(&self, m: i32) -> Complex64 {
        self.taps
            .iter()
            .enumerate()
            .map(|(d, &t)| {
                let lag = (d + self.delay) as f64;
                t * Complex64::from_polar(1.0, -2.0 * PI * (m as f64) * lag / FFT_SIZE as f64)
            })
            .sum()
    }
}

/// Linear convolution (trimmed to the input length) plus complex AWGN at
/// `snr_db` relative to the post-channel signal power.
pub fn propagate(x: &[Complex64], channel: &ChannelRealization, noise_seed: u64) -> Vec<Complex64> {
    let mut y: Vec<Complex64> = (0..x.len())
        .map(|n| {
            channel
                .taps
                .iter()
                .enumerate()
                .map(|(d, &t)| (d + channel.delay, t))
                .take_while(|&(lag, _)| lag <= n)
                .map(|(lag, t)| t * x[n - lag])
                .sum()
        })
        .collect();
    if channel.snr_db.is_finite() {
        let power = signal::mean_power(&y);
        let sigma = (power / 10f64.powf(channel.snr_db / 10.0) / 2.0).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for s in &mut y {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *s += Complex64::new(re, im) * sigma;
        }
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    Ls,
    Mmse,
}

/// LS (optionally MMSE-shrunk) CSI estimate from the two L-LTF symbols at
/// samples 192..256 and 256..320.
///
/// `noise_var` is the per-bin variance of the LS estimate; MMSE scales each
/// bin by `|h|^2 / (|h|^2 + noise_var)`.
pub fn estimate_csi(
    rx: &[Complex64],
    mode: EstimatorMode,
    noise_var: f64,
    device_id: u32,
) -> Result<CsiMeasurement> {
    if rx.len() != PREAMBLE_LEN {
        return Err(Error::invalid(format!(
            "expected a {PREAMBLE_LEN}-sample capture, got {}",
            rx.len()
        )));
    }
    let y1 = signal::dft(&rx[192..256], false)?;
    let y2 = signal::dft(&rx[256..320], false)?;
    let h: Vec<Complex64> = SUBCARRIER_INDICES
        .iter()
        .zip(LTF_SYMBOL.iter())
        .map(|(&m, &l)| {
            let bin = (m as i64).rem_euclid(FFT_SIZE as i64) as usize;
            let avg = (y1[bin] + y2[bin]) * 0.5;
            let ls = avg / (FFT_SIZE as f64 * l as f64);
            match mode {
                EstimatorMode::Ls => ls,
                EstimatorMode::Mmse => {
                    let p = ls.norm_sqr();
                    if p + noise_var > 0.0 {
                        ls * (p / (p + noise_var))
                    } else {
                        ls
                    }
                }
            }
        })
        .collect();
    CsiMeasurement::new(h, device_id)
}

/// Transmitted preamble capture (post channel, pre estimation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqFrame {
    pub v: Vec<Complex64>,
    pub device_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_devices: usize,
    pub frames_per_device: usize,
    pub snr_db: f64,
    pub master_seed: u64,
    /// Label of the first device; later devices count up from here.
    #[serde(default)]
    pub first_device_id: u32,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub ranges: ImpairmentRanges,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorMode,
}

fn default_estimator() -> EstimatorMode {
    EstimatorMode::Ls
}

impl DatasetConfig {
    pub fn new(num_devices: usize, frames_per_device: usize, snr_db: f64, master_seed: u64) -> Self {
        Self {
            num_devices,
            frames_per_device,
            snr_db,
            master_seed,
            first_device_id: 0,
            channel: ChannelConfig::default(),
            ranges: ImpairmentRanges::default(),
            estimator: EstimatorMode::Ls,
        }
    }

    pub fn device_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.num_devices as u32).map(move |i| self.first_device_id + i)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

/// Paired IQ and CSI frames in device-major, frame-minor order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub iq: Vec<IqFrame>,
    pub csi: Vec<CsiMeasurement>,
    pub profiles: Vec<DeviceProfile>,
    pub manifest: Manifest,
}

/// Simulates one frame of a device: returns the capture and its CSI.
pub fn simulate_frame(
    synth: &Synthesizer,
    profile: &DeviceProfile,
    channel: &ChannelRealization,
    noise_seed: u64,
    estimator: EstimatorMode,
) -> Result<(IqFrame, CsiMeasurement)> {
    let tx = apply_impairments(&synth.ideal(), profile, SAMPLE_RATE);
    let rx = propagate(&tx, channel, noise_seed);
    let noise_var = if channel.snr_db.is_finite() {
        // LS error variance per bin: sample noise variance / (2 * 64).
        signal::mean_power(&rx) / (1.0 + 10f64.powf(channel.snr_db / 10.0)) / (2.0 * FFT_SIZE as f64)
    } else {
        0.0
    };
    let csi = estimate_csi(&rx, estimator, noise_var, profile.device_id)?;
    Ok((
        IqFrame {
            v: rx,
            device_id: profile.device_id,
        },
        csi,
    ))
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<SimDataset> {
    if config.num_devices < 2 {
        return Err(Error::invalid("a dataset needs at least two devices"));
    }
    if config.frames_per_device < 1 {
        return Err(Error::invalid("frames_per_device must be at least 1"));
    }
    let synth = Synthesizer::default();
    let total = config.num_devices * config.frames_per_device;
    let mut iq = Vec::with_capacity(total);
    let mut csi = Vec::with_capacity(total);
    let mut profiles = Vec::with_capacity(config.num_devices);
    let mut counts = BTreeMap::new();

    for device_id in config.device_ids() {
        let profile = sample_profile(config.master_seed, device_id, &config.ranges);
        let static_channel = match config.channel.coherence {
            Coherence::PerDevice => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    config.master_seed,
                    TAG_CHANNEL,
                    device_id as u64,
                    0,
                ));
                Some(ChannelRealization::draw(&mut rng, &config.channel, config.snr_db))
            }
            Coherence::PerFrame => None,
        };
        for frame in 0..config.frames_per_device {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.master_seed,
                TAG_FRAME,
                device_id as u64,
                frame as u64,
            ));
            let channel = match &static_channel {
                Some(c) => c.clone(),
                None => ChannelRealization::draw(&mut rng, &config.channel, config.snr_db),
            };
            let noise_seed: u64 = rng.random();
            let (frame_iq, frame_csi) = simulate_frame(&synth, &profile, &channel, noise_seed, config.estimator)?;
            iq.push(frame_iq);
            csi.push(frame_csi);
        }
        counts.insert(device_id, config.frames_per_device);
        profiles.push(profile);
    }

    let manifest = Manifest {
        kind: DatasetKind::Paired,
        device_labels: config.device_ids().collect(),
        frames_per_device: counts,
        seed: config.master_seed,
        config_hash: config.hash(),
        files: BTreeMap::new(),
    };
    Ok(SimDataset {
        iq,
        csi,
        profiles,
        manifest,
    })
}
