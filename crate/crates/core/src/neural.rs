//! A small reverse-mode training engine.
//!
//! Only the pieces the fingerprinting models need are here: dilated causal
//! 1-D convolutions, dense layers, rectifiers, temporal mean pooling,
//! softmax with cross-entropy, mean squared error, Adam and a cosine
//! learning-rate schedule. Each layer caches what its backward pass needs
//! and accumulates parameter gradients into the owning [`Tensor`].
//!
//! Samples are processed one at a time; callers accumulate gradients over a
//! batch and scale the loss gradient by `1/batch`.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::csi;
use crate::error::{Error, Result};
use crate::{NUM_SUBCARRIERS, PREAMBLE_LEN};

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    /// Trainable tensor with a zeroed gradient buffer.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let grad = Some(vec![0.0; values.len()]);
        Self { shape, values, grad }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }
}

/// Anything that owns trainable tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// SHA-256 over the little-endian bytes of every parameter value.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.params() {
            for v in &p.values {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Architecture of the extractors and heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kernel: usize,
    pub dilations: Vec<usize>,
    /// Output channels of each convolution stage.
    pub widths: Vec<usize>,
    /// Hidden width of the two-layer heads and the auxiliary network.
    pub hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            kernel: 3,
            dilations: vec![1, 2, 4, 8],
            widths: vec![32, 32, 64, 64],
            hidden: 128,
        }
    }
}

impl ArchConfig {
    pub const INPUT_CHANNELS: usize = 2;

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&Self::INPUT_CHANNELS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.widths.is_empty() || self.widths.len() != self.dilations.len() {
            return Err(Error::invalid(format!("inconsistent architecture {self:?}")));
        }
        if self.widths.iter().chain(&self.dilations).any(|&v| v == 0) || self.hidden == 0 {
            return Err(Error::invalid("architecture sizes must be positive"));
        }
        Ok(())
    }

    /// Short hash identifying the architecture.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("arch serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().map(|d| (self.kernel - 1) * d).sum::<usize>()
    }
}

fn uniform_init<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    // He-uniform for rectifier networks.
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Dilated causal convolution over `[channels, time]` row-major data.
///
/// `out[o, t] = b[o] + sum_{i, j} w[o, i, j] * x[i, t - (k - 1 - j) * d]`
/// with zero padding on the left only.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalConv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl CausalConv1d {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize, rng: &mut R) -> Self {
        let w = uniform_init(rng, out_ch * in_ch * kernel, in_ch * kernel);
        Self {
            in_ch,
            out_ch,
            kernel,
            dilation,
            weight: Tensor::param(vec![out_ch, in_ch, kernel], w),
            bias: Tensor::param(vec![out_ch], vec![0.0; out_ch]),
        }
    }

    fn shift(&self, j: usize) -> usize {
        (self.kernel - 1 - j) * self.dilation
    }

    /// Unrolled input: row `i * kernel + j` holds channel `i` delayed by `shift(j)`.
    fn im2col(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut cols = vec![0.0; self.in_ch * self.kernel * n];
        for i in 0..self.in_ch {
            let xr = &x[i * n..(i + 1) * n];
            for j in 0..self.kernel {
                let s = self.shift(j);
                if s < n {
                    let row = (i * self.kernel + j) * n;
                    cols[row + s..row + n].copy_from_slice(&xr[..n - s]);
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_ch * n);
        let ik = self.in_ch * self.kernel;
        let cols = self.im2col(x, n);
        let mut out = Vec::with_capacity(self.out_ch * n);
        for &b in &self.bias.values {
            out.extend(std::iter::repeat_n(b, n));
        }
        gemm(
            (self.out_ch, ik, n),
            (&self.weight.values, ik, 1),
            (&cols, n, 1),
            1.0,
            (&mut out, n),
        );
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &[f64], n: usize, grad_out: &[f64], want_input_grad: bool) -> Option<Vec<f64>> {
        let ik = self.in_ch * self.kernel;
        let cols = self.im2col(x, n);
        let gb = self.bias.grad.get_or_insert_with(|| vec![0.0; self.out_ch]);
        for (g, row) in gb.iter_mut().zip(grad_out.chunks_exact(n)) {
            *g += row.iter().sum::<f64>();
        }
        let nw = self.weight.values.len();
        let gw = self.weight.grad.get_or_insert_with(|| vec![0.0; nw]);
        // gW += gOut * cols^T
        gemm((self.out_ch, n, ik), (grad_out, n, 1), (&cols, 1, n as isize), 1.0, (gw, ik));
        if !want_input_grad {
            return None;
        }
        // gCols = W^T * gOut, then fold back onto the input positions.
        let mut gcols = vec![0.0; ik * n];
        gemm(
            (ik, self.out_ch, n),
            (&self.weight.values, 1, ik as isize),
            (grad_out, n, 1),
            0.0,
            (&mut gcols, n),
        );
        let mut grad_x = vec![0.0; self.in_ch * n];
        for i in 0..self.in_ch {
            let gx = &mut grad_x[i * n..(i + 1) * n];
            for j in 0..self.kernel {
                let s = self.shift(j);
                if s < n {
                    let row = &gcols[(i * self.kernel + j) * n..];
                    for (g, &v) in gx[..n - s].iter_mut().zip(&row[s..n]) {
                        *g += v;
                    }
                }
            }
        }
        Some(grad_x)
    }
}

/// Row-major `C = A * B + beta * C` with explicit strides for `A` and `B`.
///
/// Dimensions are `(m, k, n)`; operands are `(slice, row_stride, col_stride)`.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, isize),
    (b, rsb, csb): (&[f64], usize, isize),
    beta: f64,
    (c, rsc): (&mut [f64], usize),
) {
    let extent = |rows: usize, cols: usize, rs: usize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= extent(m, k, rsa, csa));
    assert!(b.len() >= extent(k, n, rsb, csb));
    assert!(c.len() >= extent(m, n, rsc, 1));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa,
            b.as_ptr(),
            rsb as isize,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

impl Parameterized for CausalConv1d {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: Tensor::param(vec![out_dim, in_dim], uniform_init(rng, out_dim * in_dim, in_dim)),
            bias: Tensor::param(vec![out_dim], vec![0.0; out_dim]),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .values
            .chunks_exact(self.in_dim)
            .zip(&self.bias.values)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let in_dim = self.in_dim;
        let mut grad_x = vec![0.0; in_dim];
        let w = &self.weight.values;
        let gw = self.weight.grad.get_or_insert_with(|| vec![0.0; w.len()]);
        let gb = self.bias.grad.get_or_insert_with(|| vec![0.0; self.out_dim]);
        for (o, &g) in grad_out.iter().enumerate() {
            gb[o] += g;
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                grow[i] += g * x[i];
                grad_x[i] += g * row[i];
            }
        }
        grad_x
    }
}

impl Parameterized for Dense {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Stack of dilated causal convolutions with rectifiers and temporal mean
/// pooling; maps `[2, n]` to a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub layers: Vec<CausalConv1d>,
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ExtractorCache {
    n: usize,
    /// Input of every layer followed by the rectified output of the last.
    maps: Vec<Vec<f64>>,
    pub features: Vec<f64>,
}

impl Extractor {
    pub fn new<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Self {
        let mut in_ch = ArchConfig::INPUT_CHANNELS;
        let layers = arch
            .widths
            .iter()
            .zip(&arch.dilations)
            .map(|(&w, &d)| {
                let layer = CausalConv1d::new(in_ch, w, arch.kernel, d, rng);
                in_ch = w;
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(ArchConfig::INPUT_CHANNELS, |l| l.out_ch)
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.shape.len() != 2 || x.shape[0] != ArchConfig::INPUT_CHANNELS {
            return Err(Error::invalid(format!("extractor expects [2, n] input, got {:?}", x.shape)));
        }
        let n = x.shape[1];
        if n < 16 {
            return Err(Error::invalid(format!("sequence length {n} is below the minimum of 16")));
        }
        Ok(n)
    }

    /// Rectified output map of every layer, before pooling.
    pub fn layer_maps(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let cache = self.forward_cached(x)?;
        Ok(cache.maps[1..].to_vec())
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<ExtractorCache> {
        let n = self.check_input(x)?;
        let mut maps = Vec::with_capacity(self.layers.len() + 1);
        maps.push(x.values.clone());
        for layer in &self.layers {
            let mut y = layer.forward(maps.last().unwrap(), n);
            relu_in_place(&mut y);
            maps.push(y);
        }
        let last = maps.last().unwrap();
        let features = last.chunks_exact(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
        Ok(ExtractorCache { n, maps, features })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.features)
    }

    /// Backpropagates `grad_features` through pooling and every layer.
    pub fn backward(&mut self, cache: &ExtractorCache, grad_features: &[f64]) {
        let n = cache.n;
        let last = cache.maps.last().unwrap();
        let mut grad: Vec<f64> = last
            .iter()
            .enumerate()
            .map(|(idx, &v)| if v > 0.0 { grad_features[idx / n] / n as f64 } else { 0.0 })
            .collect();
        for (li, layer) in self.layers.iter_mut().enumerate().rev() {
            let input = &cache.maps[li];
            let want = li > 0;
            if let Some(mut gx) = layer.backward(input, n, &grad, want) {
                for (g, &v) in gx.iter_mut().zip(input) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                grad = gx;
            }
        }
    }
}

impl Parameterized for Extractor {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Two dense layers with a rectifier between them. Used for the classifier,
/// the discriminator (followed by softmax) and the auxiliary network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Dense,
    pub fc2: Dense,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn new<R: Rng>(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: Dense::new(in_dim, hidden, rng),
            fc2: Dense::new(hidden, out_dim, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpCache {
        let mut hidden = self.fc1.forward(x);
        relu_in_place(&mut hidden);
        let output = self.fc2.forward(&hidden);
        MlpCache {
            input: x.to_vec(),
            hidden,
            output,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).output
    }

    pub fn backward(&mut self, cache: &MlpCache, grad_out: &[f64]) -> Vec<f64> {
        let mut gh = self.fc2.backward(&cache.hidden, grad_out);
        for (g, &h) in gh.iter_mut().zip(&cache.hidden) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        self.fc1.backward(&cache.input, &gh)
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }
}

/// Numerically stable softmax; entries are floored at [`PROB_FLOOR`] and
/// renormalised so they stay strictly positive.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut p: Vec<f64> = exps.iter().map(|e| (e / sum).max(PROB_FLOOR)).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Mean over the batch of `-log(pred[label])`, with the probability floor.
pub fn cross_entropy(pred: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::invalid("cross-entropy needs one label per prediction"));
    }
    let mut total = 0.0;
    for (p, &l) in pred.iter().zip(labels) {
        let v = *p
            .get(l)
            .ok_or_else(|| Error::invalid(format!("label {l} outside {} classes", p.len())))?;
        total -= v.max(PROB_FLOOR).ln();
    }
    Ok(total / pred.len() as f64)
}

/// Gradient of `-log softmax(z)[label]` with respect to the logits.
pub fn softmax_cross_entropy_grad(probs: &[f64], label: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == label { p - 1.0 } else { p })
        .collect()
}

/// Mean of squared elementwise differences.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "mse needs equal non-empty shapes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Gradient of [`mse`] with respect to `a`; the gradient for `b` is its negation.
pub fn mse_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let scale = 2.0 / a.len() as f64;
    a.iter().zip(b).map(|(x, y)| scale * (x - y)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut AdamMoments,
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam over a fixed list of tensors, matched by position.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: Vec<AdamMoments>,
}

impl Adam {
    pub fn new<P: Parameterized + ?Sized>(model: &P) -> Self {
        Self {
            cfg: AdamConfig::default(),
            step: 0,
            moments: model.params().iter().map(|p| AdamMoments::new(p.len())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the accumulated gradients and clears them.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, lr: f64) {
        self.step += 1;
        for (p, m) in model.params_mut().into_iter().zip(&mut self.moments) {
            let grad = p.grad.take().unwrap_or_else(|| vec![0.0; p.values.len()]);
            adam_step(&mut p.values, &grad, m, self.step, lr, &self.cfg);
            p.grad = Some(grad);
            p.zero_grad();
        }
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * epoch / total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    let frac = epoch.min(total_epochs) as f64 / total_epochs as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Input representation fed to an extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    /// 320-sample time-domain vector (TDSG output or IQ capture).
    TimeDomain,
    /// 52 processed CSI values.
    Csi,
    /// 52 raw CSI values as amplitude and unwrapped phase.
    AmplitudePhase,
}

impl InputMode {
    pub fn length(self) -> usize {
        match self {
            InputMode::TimeDomain => PREAMBLE_LEN,
            InputMode::Csi | InputMode::AmplitudePhase => NUM_SUBCARRIERS,
        }
    }
}

/// Complex vector to a `[2, n]` tensor of real and imaginary parts,
/// scaled to unit RMS.
pub fn encode_complex(x: &[Complex64]) -> Result<Tensor> {
    crate::signal::ensure_finite(x, "encoder input")?;
    let rms = crate::signal::rms(x);
    if !(rms > 0.0) {
        return Err(Error::invalid("cannot normalise a zero-energy frame"));
    }
    let n = x.len();
    let mut values = Vec::with_capacity(2 * n);
    values.extend(x.iter().map(|s| s.re / rms));
    values.extend(x.iter().map(|s| s.im / rms));
    Tensor::new(vec![2, n], values)
}

/// Encodes a frame for the given mode, checking its length.
pub fn encode_input(x: &[Complex64], mode: InputMode) -> Result<Tensor> {
    if x.len() != mode.length() {
        return Err(Error::invalid(format!(
            "{mode:?} input must have {} samples, got {}",
            mode.length(),
            x.len()
        )));
    }
    match mode {
        InputMode::TimeDomain | InputMode::Csi => encode_complex(x),
        InputMode::AmplitudePhase => {
            crate::signal::ensure_finite(x, "encoder input")?;
            let (amp, phase) = csi::amplitude_phase(x)?;
            let rms = crate::signal::rms(x);
            if !(rms > 0.0) {
                return Err(Error::invalid("cannot normalise a zero-energy frame"));
            }
            let mut values: Vec<f64> = amp.iter().map(|a| a / rms).collect();
            values.extend(phase);
            Tensor::new(vec![2, x.len()], values)
        }
    }
}

/// Persisted parameter set: raw `f64` blob plus a JSON sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub sidecar: BundleSidecar,
    pub tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSidecar {
    pub format: String,
    pub role: String,
    pub arch: ArchConfig,
    pub arch_fingerprint: String,
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
    pub metadata: serde_json::Value,
    pub shapes: Vec<Vec<usize>>,
    pub blob_sha256: String,
}

pub const BUNDLE_FORMAT: &str = "csi2q-bundle/1";

impl ModelBundle {
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.tensors.iter().map(|t| t.len()).sum::<usize>());
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn sidecar_path(blob_path: &Path) -> PathBuf {
        let mut s = blob_path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes `path` (parameter blob) and `path.json` (sidecar).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let blob = self.blob();
        let mut sidecar = self.sidecar.clone();
        sidecar.blob_sha256 = hex::encode(Sha256::digest(&blob));
        sidecar.shapes = self.tensors.iter().map(|t| t.shape.clone()).collect();
        fs::write(path, &blob)?;
        fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar: BundleSidecar = serde_json::from_str(&fs::read_to_string(Self::sidecar_path(path))?)?;
        if sidecar.format != BUNDLE_FORMAT {
            return Err(Error::Format(format!("unknown bundle format {}", sidecar.format)));
        }
        let blob = fs::read(path)?;
        if hex::encode(Sha256::digest(&blob)) != sidecar.blob_sha256 {
            return Err(Error::Format("parameter blob does not match its checksum".into()));
        }
        let expected: usize = sidecar.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if blob.len() != 8 * expected {
            return Err(Error::Format(format!(
                "blob holds {} bytes, shapes need {}",
                blob.len(),
                8 * expected
            )));
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let tensors = sidecar
            .shapes
            .iter()
            .map(|shape| {
                let n = shape.iter().product();
                Tensor::param(shape.clone(), values.by_ref().take(n).collect())
            })
            .collect();
        Ok(Self { sidecar, tensors })
    }

    /// Copies stored tensors into `model`, checking shapes.
    pub fn load_into<P: Parameterized + ?Sized>(tensors: &[Tensor], model: &mut P) -> Result<()> {
        let params = model.params_mut();
        if params.len() != tensors.len() {
            return Err(Error::ModelMismatch(format!(
                "bundle has {} tensors, model expects {}",
                tensors.len(),
                params.len()
            )));
        }
        for (p, t) in params.into_iter().zip(tensors) {
            if p.shape != t.shape {
                return Err(Error::ModelMismatch(format!(
                    "tensor shape {:?} does not match {:?}",
                    t.shape, p.shape
                )));
            }
            p.values.copy_from_slice(&t.values);
        }
        Ok(())
    }
}
