//! Two-stage training: a source extractor and discriminator on IQ frames,
//! then a target extractor and classifier on CSI-derived features, pulled
//! towards the frozen source representation through an auxiliary network.

use std::io::Write;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::neural::{
    cross_entropy, encode_input, mse, mse_grad, softmax, softmax_cross_entropy_grad, Adam, ArchConfig,
    BundleSidecar, Extractor, InputMode, Mlp, ModelBundle, Parameterized, Tensor, BUNDLE_FORMAT,
};
use crate::sim::derive_seed;

const TAG_SOURCE_INIT: u64 = 0x5352_4349;
const TAG_SOURCE_ORDER: u64 = 0x5352_4f52;
const TAG_TARGET_INIT: u64 = 0x5447_4949;
const TAG_TARGET_ORDER: u64 = 0x5447_4f52;
const TAG_AUX_INIT: u64 = 0x4155_5849;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_source: f64,
    pub lr_target: f64,
    pub lr_aux: f64,
    pub epochs_source: usize,
    pub epochs_target: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_source: 1e-4,
            lr_target: 1e-4,
            lr_aux: 1e-4,
            epochs_source: 100,
            epochs_target: 100,
            lambda: 0.30,
            batch_size: 32,
            seed: 0,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.epochs_source == 0 || self.epochs_target == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        for lr in [self.lr_source, self.lr_target, self.lr_aux] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Encoded frames with class indices into `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    pub mode: InputMode,
    /// Device id of each class index.
    pub classes: Vec<u32>,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledFeatureSet {
    /// Classes are the sorted distinct device ids.
    pub fn from_frames<'a, I>(frames: I, mode: InputMode) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [Complex64], u32)> + Clone,
    {
        let mut classes: Vec<u32> = frames.clone().into_iter().map(|(_, d)| d).collect();
        classes.sort_unstable();
        classes.dedup();
        Self::with_classes(frames, mode, &classes, None)
    }

    /// Labels frames against a fixed class list. Devices outside it get
    /// `unknown_label` or are rejected.
    pub fn with_classes<'a, I>(frames: I, mode: InputMode, classes: &[u32], unknown_label: Option<usize>) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [Complex64], u32)>,
    {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (x, device) in frames {
            let label = match classes.iter().position(|&c| c == device) {
                Some(l) => l,
                None => unknown_label
                    .ok_or_else(|| Error::invalid(format!("device {device} is not a registered class")))?,
            };
            inputs.push(encode_input(x, mode)?);
            labels.push(label);
        }
        Ok(Self {
            mode,
            classes: classes.to_vec(),
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn distinct_labels(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            mode: self.mode,
            classes: self.classes.clone(),
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Stratified split by frame within each class: the first
    /// `round(train_fraction * count)` frames of a shuffled class go to train.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::invalid(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for class in 0..self.num_classes() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let k = (train_fraction * idx.len() as f64).round() as usize;
            train.extend_from_slice(&idx[..k]);
            test.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Softmax output and the pre-softmax activation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub activations: Vec<f64>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn predict_with(extractor: &Extractor, head: &Mlp, x: &Tensor) -> Result<Prediction> {
    let activations = head.forward(&extractor.forward(x)?);
    Ok(Prediction {
        probs: softmax(&activations),
        activations,
    })
}

/// Source pair: extractor and discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub arch: ArchConfig,
    pub mode: InputMode,
    pub classes: Vec<u32>,
    pub extractor: Extractor,
    pub discriminator: Mlp,
}

/// Target triple: extractor, auxiliary network and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub arch: ArchConfig,
    pub mode: InputMode,
    pub classes: Vec<u32>,
    pub extractor: Extractor,
    pub aux: Mlp,
    pub classifier: Mlp,
}

impl SourceModel {
    pub fn new(arch: &ArchConfig, mode: InputMode, classes: Vec<u32>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SOURCE_INIT, 0, 0));
        let extractor = Extractor::new(arch, &mut rng);
        let discriminator = Mlp::new(arch.feature_dim(), arch.hidden, classes.len(), &mut rng);
        Self {
            arch: arch.clone(),
            mode,
            classes,
            extractor,
            discriminator,
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        predict_with(&self.extractor, &self.discriminator, x)
    }

    pub fn to_bundle(&self, config: &TrainConfig) -> ModelBundle {
        let tensors = self
            .extractor
            .params()
            .into_iter()
            .chain(self.discriminator.params())
            .cloned()
            .collect();
        bundle("source", &self.arch, self.mode, &self.classes, config, tensors)
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        let (mode, classes) = bundle_meta(bundle, "source")?;
        let mut model = Self::new(&bundle.sidecar.arch, mode, classes, 0);
        let n = model.extractor.params().len();
        check_count(bundle, n + model.discriminator.params().len())?;
        ModelBundle::load_into(&bundle.tensors[..n], &mut model.extractor)?;
        ModelBundle::load_into(&bundle.tensors[n..], &mut model.discriminator)?;
        Ok(model)
    }
}

impl TargetModel {
    pub fn new(arch: &ArchConfig, mode: InputMode, classes: Vec<u32>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_TARGET_INIT, 0, 0));
        let extractor = Extractor::new(arch, &mut rng);
        let classifier = Mlp::new(arch.feature_dim(), arch.hidden, classes.len(), &mut rng);
        // Separate stream so the auxiliary network never shifts the others.
        let mut aux_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_AUX_INIT, 0, 0));
        let aux = Mlp::new(arch.feature_dim(), arch.hidden, arch.feature_dim(), &mut aux_rng);
        Self {
            arch: arch.clone(),
            mode,
            classes,
            extractor,
            aux,
            classifier,
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        predict_with(&self.extractor, &self.classifier, x)
    }

    pub fn predict_set(&self, set: &LabeledFeatureSet) -> Result<Vec<Prediction>> {
        set.inputs.iter().map(|x| self.predict(x)).collect()
    }

    pub fn to_bundle(&self, config: &TrainConfig) -> ModelBundle {
        let tensors = self
            .extractor
            .params()
            .into_iter()
            .chain(self.aux.params())
            .chain(self.classifier.params())
            .cloned()
            .collect();
        bundle("target", &self.arch, self.mode, &self.classes, config, tensors)
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        let (mode, classes) = bundle_meta(bundle, "target")?;
        let mut model = Self::new(&bundle.sidecar.arch, mode, classes, 0);
        let ne = model.extractor.params().len();
        let na = model.aux.params().len();
        check_count(bundle, ne + na + model.classifier.params().len())?;
        ModelBundle::load_into(&bundle.tensors[..ne], &mut model.extractor)?;
        ModelBundle::load_into(&bundle.tensors[ne..ne + na], &mut model.aux)?;
        ModelBundle::load_into(&bundle.tensors[ne + na..], &mut model.classifier)?;
        Ok(model)
    }
}

fn bundle(
    role: &str,
    arch: &ArchConfig,
    mode: InputMode,
    classes: &[u32],
    config: &TrainConfig,
    tensors: Vec<Tensor>,
) -> ModelBundle {
    ModelBundle {
        sidecar: BundleSidecar {
            format: BUNDLE_FORMAT.into(),
            role: role.into(),
            arch: arch.clone(),
            arch_fingerprint: arch.fingerprint(),
            hyperparameters: serde_json::to_value(config).expect("config serialises"),
            seed: config.seed,
            metadata: json!({ "mode": mode, "classes": classes }),
            shapes: tensors.iter().map(|t| t.shape.clone()).collect(),
            blob_sha256: String::new(),
        },
        tensors,
    }
}

fn bundle_meta(bundle: &ModelBundle, role: &str) -> Result<(InputMode, Vec<u32>)> {
    let sc = &bundle.sidecar;
    if sc.role != role {
        return Err(Error::ModelMismatch(format!("expected a {role} bundle, found {}", sc.role)));
    }
    if sc.arch.fingerprint() != sc.arch_fingerprint {
        return Err(Error::ModelMismatch("architecture fingerprint does not match".into()));
    }
    sc.arch.validate()?;
    let mode = serde_json::from_value(sc.metadata["mode"].clone())?;
    let classes: Vec<u32> = serde_json::from_value(sc.metadata["classes"].clone())?;
    if classes.len() < 2 {
        return Err(Error::ModelMismatch("bundle needs at least two classes".into()));
    }
    Ok((mode, classes))
}

fn check_count(bundle: &ModelBundle, expected: usize) -> Result<()> {
    if bundle.tensors.len() != expected {
        return Err(Error::ModelMismatch(format!(
            "bundle has {} tensors, architecture needs {expected}",
            bundle.tensors.len()
        )));
    }
    Ok(())
}

/// One line of the training trace; unused losses are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss_source: f64,
    pub loss_target: f64,
    pub loss_aux: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wr.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Loss of the last epoch divided by that of the first.
    pub fn final_over_first(&self, pick: impl Fn(&TraceRow) -> f64) -> Option<f64> {
        let first = pick(self.rows.first()?);
        let last = pick(self.rows.last()?);
        Some(last / first)
    }
}

fn check_trainable(set: &LabeledFeatureSet) -> Result<()> {
    if set.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if set.num_classes() < 2 || set.distinct_labels() < 2 {
        return Err(Error::invalid("training needs at least two classes"));
    }
    Ok(())
}

fn epoch_order(seed: u64, tag: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, epoch as u64, 0)));
    order
}

/// Pretrains the source extractor and discriminator on labelled IQ frames.
pub fn train_source(set: &LabeledFeatureSet, config: &TrainConfig) -> Result<(SourceModel, TrainTrace)> {
    config.validate()?;
    check_trainable(set)?;
    let mut model = SourceModel::new(&config.arch, set.mode, set.classes.clone(), config.seed);
    let mut opt_e = Adam::new(&model.extractor);
    let mut opt_d = Adam::new(&model.discriminator);
    let mut trace = TrainTrace::default();
    for epoch in 0..config.epochs_source {
        let lr = crate::neural::cosine_lr(epoch, config.epochs_source, config.lr_source);
        let order = epoch_order(config.seed, TAG_SOURCE_ORDER, epoch, set.len());
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let cache = model.extractor.forward_cached(&set.inputs[i])?;
                let hc = model.discriminator.forward_cached(&cache.features);
                let p = softmax(&hc.output);
                total += cross_entropy(std::slice::from_ref(&p), &[set.labels[i]])?;
                let g: Vec<f64> = softmax_cross_entropy_grad(&p, set.labels[i])
                    .into_iter()
                    .map(|v| v * scale)
                    .collect();
                let gf = model.discriminator.backward(&hc, &g);
                model.extractor.backward(&cache, &gf);
            }
            opt_d.step(&mut model.discriminator, lr);
            opt_e.step(&mut model.extractor, lr);
        }
        trace.rows.push(TraceRow {
            epoch: epoch + 1,
            loss_source: total / set.len() as f64,
            loss_target: f64::NAN,
            loss_aux: f64::NAN,
            lr,
        });
    }
    Ok((model, trace))
}

/// Contribution of the auxiliary loss to the gradient of one target
/// feature vector, already weighted by `lambda` and the batch scale.
pub fn aux_feature_grad(e_aux: &[f64], e_target: &[f64], lambda: f64, scale: f64) -> Vec<f64> {
    if lambda == 0.0 {
        return vec![0.0; e_target.len()];
    }
    mse_grad(e_target, e_aux).into_iter().map(|g| lambda * scale * g).collect()
}

/// Trains the target extractor and classifier. With a source model, its
/// extractor stays frozen and feeds the auxiliary network, whose output is
/// aligned with the target features by mean squared error.
pub fn train_target(
    set: &LabeledFeatureSet,
    source: Option<&SourceModel>,
    config: &TrainConfig,
) -> Result<(TargetModel, TrainTrace)> {
    config.validate()?;
    check_trainable(set)?;
    let mut model = TargetModel::new(&config.arch, set.mode, set.classes.clone(), config.seed);
    let source_features = match source {
        Some(src) => {
            if src.arch.feature_dim() != config.arch.feature_dim() {
                return Err(Error::invalid(format!(
                    "source feature dimension {} does not match target {}",
                    src.arch.feature_dim(),
                    config.arch.feature_dim()
                )));
            }
            if src.mode != set.mode {
                return Err(Error::invalid(format!(
                    "source model reads {:?} inputs, target set holds {:?}",
                    src.mode, set.mode
                )));
            }
            // The source extractor is frozen, so its features are fixed.
            Some(
                set.inputs
                    .iter()
                    .map(|x| src.extractor.forward(x))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };

    let mut opt_e = Adam::new(&model.extractor);
    let mut opt_c = Adam::new(&model.classifier);
    let mut opt_a = Adam::new(&model.aux);
    let mut trace = TrainTrace::default();
    for epoch in 0..config.epochs_target {
        let lr = crate::neural::cosine_lr(epoch, config.epochs_target, config.lr_target);
        let lr_aux = crate::neural::cosine_lr(epoch, config.epochs_target, config.lr_aux);
        let order = epoch_order(config.seed, TAG_TARGET_ORDER, epoch, set.len());
        let (mut total_t, mut total_a) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let cache = model.extractor.forward_cached(&set.inputs[i])?;
                let e_t = &cache.features;
                let hc = model.classifier.forward_cached(e_t);
                let p = softmax(&hc.output);
                total_t += cross_entropy(std::slice::from_ref(&p), &[set.labels[i]])?;
                let g: Vec<f64> = softmax_cross_entropy_grad(&p, set.labels[i])
                    .into_iter()
                    .map(|v| v * scale)
                    .collect();
                let mut g_feat = model.classifier.backward(&hc, &g);
                if let Some(fs) = &source_features {
                    let ac = model.aux.forward_cached(&fs[i]);
                    total_a += mse(&ac.output, e_t)?;
                    let ga: Vec<f64> = mse_grad(&ac.output, e_t).into_iter().map(|v| v * scale).collect();
                    model.aux.backward(&ac, &ga);
                    if config.lambda != 0.0 {
                        for (gf, ax) in g_feat.iter_mut().zip(aux_feature_grad(&ac.output, e_t, config.lambda, scale)) {
                            *gf += ax;
                        }
                    }
                }
                model.extractor.backward(&cache, &g_feat);
            }
            if source_features.is_some() {
                opt_a.step(&mut model.aux, lr_aux);
            }
            opt_e.step(&mut model.extractor, lr);
            opt_c.step(&mut model.classifier, lr);
        }
        let n = set.len() as f64;
        trace.rows.push(TraceRow {
            epoch: epoch + 1,
            loss_source: f64::NAN,
            loss_target: total_t / n,
            loss_aux: if source_features.is_some() { total_a / n } else { f64::NAN },
            lr,
        });
    }
    Ok((model, trace))
}

/// Fraction of frames whose argmax matches the label.
pub fn accuracy(predictions: &[Prediction], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, &l)| p.argmax() == l).count();
    hits as f64 / labels.len() as f64
}
