//! Experiment runner: metrics, the nested ablation ladder and the
//! open-world protocol.
//!
//! Every run is a pure function of the plan and its seeds. For each seed a
//! target population and a disjoint source population are simulated, CSI is
//! preprocessed once, and frames discarded by the jitter check are dropped
//! from every configuration so all rungs see the same frames.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::csi::{preprocess_frame, PreprocessConfig};
use crate::error::{Error, Result};
use crate::neural::InputMode;
use crate::openmax::{correct_activations, fit_calibration, CalibrationFile};
use crate::preamble::Synthesizer;
use crate::sim::{derive_seed, generate_dataset, ChannelConfig, Coherence, DatasetConfig, ImpairmentRanges};
use crate::train::{train_source, train_target, LabeledFeatureSet, Prediction, SourceModel, TargetModel, TrainConfig};

const TAG_TARGET_DATA: u64 = 0x5444_4154;
const TAG_SOURCE_DATA: u64 = 0x5344_4154;
const TAG_SPLIT: u64 = 0x5350_4c54;

/// First label of the simulated source population.
pub const SOURCE_FIRST_DEVICE: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_f1: Vec<Option<f64>>,
    pub total: usize,
}

impl MetricsReport {
    /// Recall of one class, `None` without support.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let row = self.confusion.get(class)?;
        let support: usize = row.iter().sum();
        (support > 0).then(|| row[class] as f64 / support as f64)
    }

    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut out = String::from("truth");
        for j in 0..n {
            write!(out, ",pred_{j}").unwrap();
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            write!(out, "{i}").unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Accuracy, macro F1 over classes with support, and the confusion matrix.
pub fn compute_metrics(predictions: &[usize], truths: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if predictions.len() != truths.len() || truths.is_empty() {
        return Err(Error::invalid(format!(
            "need equal non-empty label sequences, got {} predictions and {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if let Some(bad) = predictions.iter().chain(truths).find(|&&l| l >= num_classes) {
        return Err(Error::invalid(format!("label {bad} outside {num_classes} classes")));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        confusion[t][p] += 1;
    }
    let total = truths.len();
    let correct: usize = (0..num_classes).map(|i| confusion[i][i]).sum();
    let per_class_f1: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let support: usize = confusion[c].iter().sum();
            if support == 0 {
                return None;
            }
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let tp = confusion[c][c] as f64;
            if tp == 0.0 {
                return Some(0.0);
            }
            let precision = tp / predicted as f64;
            let recall = tp / support as f64;
            Some(2.0 * precision * recall / (precision + recall))
        })
        .collect();
    let supported: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
    Ok(MetricsReport {
        accuracy: correct as f64 / total as f64,
        macro_f1: supported.iter().sum::<f64>() / supported.len() as f64,
        confusion,
        per_class_f1,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Closed,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineFlags {
    pub cim: bool,
    pub tdsg: bool,
    pub aliq: bool,
    pub openmax: bool,
}

impl PipelineFlags {
    pub const FULL: Self = Self {
        cim: true,
        tdsg: true,
        aliq: true,
        openmax: true,
    };

    /// The four nested closed-world configurations, weakest first.
    pub fn ladder() -> [Self; 4] {
        let f = |cim, tdsg, aliq| Self {
            cim,
            tdsg,
            aliq,
            openmax: false,
        };
        [f(false, false, false), f(true, false, false), f(true, true, false), f(true, true, true)]
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.cim {
            parts.push("CIM");
        }
        if self.tdsg {
            parts.push("TDSG");
        }
        if self.aliq {
            parts.push("ALIQ");
        }
        if self.openmax {
            parts.push("OpenMax");
        }
        if parts.is_empty() {
            "raw".into()
        } else {
            parts.join("+")
        }
    }

    pub fn input_mode(&self) -> InputMode {
        match (self.cim, self.tdsg) {
            (_, true) => InputMode::TimeDomain,
            (true, false) => InputMode::Csi,
            (false, false) => InputMode::AmplitudePhase,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tdsg && !self.cim {
            return Err(Error::invalid("TDSG needs CIM-processed CSI"));
        }
        if self.aliq && !self.tdsg {
            return Err(Error::invalid("ALIQ needs time-domain (TDSG) inputs"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub mode: Mode,
    pub registered_devices: Vec<u32>,
    pub unknown_devices: Vec<u32>,
    pub pipeline: PipelineFlags,
    pub frames_per_device: usize,
    /// Per-device fraction of frames used for training.
    pub train_fraction: f64,
    pub snr_db: f64,
    pub seeds: Vec<u64>,
    pub source_devices: usize,
    pub source_frames_per_device: usize,
    /// Channel of the source IQ capture; static per device by default.
    pub source_channel: ChannelConfig,
    pub delta: f64,
    pub tail_size: usize,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub channel: ChannelConfig,
    pub ranges: ImpairmentRanges,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            mode: Mode::Closed,
            registered_devices: (0..10).collect(),
            unknown_devices: Vec::new(),
            pipeline: PipelineFlags::FULL,
            frames_per_device: 300,
            train_fraction: 0.5,
            snr_db: 20.0,
            seeds: vec![1, 2, 3],
            source_devices: 20,
            source_frames_per_device: 100,
            source_channel: ChannelConfig {
                coherence: Coherence::PerDevice,
                ..ChannelConfig::default()
            },
            delta: crate::openmax::DEFAULT_DELTA,
            tail_size: crate::openmax::DEFAULT_TAIL_SIZE,
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            channel: ChannelConfig::default(),
            ranges: ImpairmentRanges::default(),
        }
    }
}

impl ExperimentPlan {
    /// Default open-world plan: 8 registered and 2 unknown devices.
    pub fn open_world() -> Self {
        Self {
            mode: Mode::Open,
            registered_devices: (0..8).collect(),
            unknown_devices: vec![8, 9],
            ..Self::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let plan: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.pipeline.validate()?;
        if self.registered_devices.len() < 2 {
            return Err(Error::invalid("need at least two registered devices"));
        }
        let mut all: Vec<u32> = self.registered_devices.iter().chain(&self.unknown_devices).copied().collect();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("registered and unknown device sets overlap or repeat"));
        }
        if all.iter().any(|&d| d >= SOURCE_FIRST_DEVICE) {
            return Err(Error::invalid(format!("target device labels must be below {SOURCE_FIRST_DEVICE}")));
        }
        if self.mode == Mode::Open && self.unknown_devices.is_empty() {
            return Err(Error::invalid("open-world mode needs unknown devices"));
        }
        if self.mode == Mode::Closed && !self.unknown_devices.is_empty() {
            return Err(Error::invalid("closed-world mode takes no unknown devices"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train fraction must lie strictly between 0 and 1"));
        }
        if self.frames_per_device < 2 || self.seeds.is_empty() {
            return Err(Error::invalid("need at least 2 frames per device and one seed"));
        }
        if self.source_devices < 2 || self.source_frames_per_device < 1 {
            return Err(Error::invalid("source population needs at least 2 devices with frames"));
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// One target frame in every representation the ladder needs.
#[derive(Debug, Clone)]
struct Frame {
    device: u32,
    raw: Vec<Complex64>,
    cim: Vec<Complex64>,
    tdsg: Vec<Complex64>,
}

impl Frame {
    fn input(&self, mode: InputMode) -> &[Complex64] {
        match mode {
            InputMode::AmplitudePhase => &self.raw,
            InputMode::Csi => &self.cim,
            InputMode::TimeDomain => &self.tdsg,
        }
    }
}

/// Simulated data for one seed, already split.
struct SeedData {
    train: Vec<Frame>,
    test: Vec<Frame>,
    /// Frames of unknown devices that enter the open-world test stream.
    unknown: Vec<Frame>,
    discarded: usize,
    source: LabeledFeatureSet,
}

fn prepare_seed(plan: &ExperimentPlan, seed: u64, need_source: bool) -> Result<SeedData> {
    let max_id = plan
        .registered_devices
        .iter()
        .chain(&plan.unknown_devices)
        .copied()
        .max()
        .unwrap_or(0);
    let mut cfg = DatasetConfig::new(
        max_id as usize + 1,
        plan.frames_per_device,
        plan.snr_db,
        derive_seed(seed, TAG_TARGET_DATA, 0, 0),
    );
    cfg.channel = plan.channel;
    cfg.ranges = plan.ranges;
    let ds = generate_dataset(&cfg)?;
    let synth = Synthesizer::default();

    let mut per_device: std::collections::BTreeMap<u32, Vec<Frame>> = Default::default();
    let mut discarded = 0;
    for m in &ds.csi {
        let known = plan.registered_devices.contains(&m.device_id);
        if !known && !plan.unknown_devices.contains(&m.device_id) {
            continue;
        }
        let p = preprocess_frame(m, &plan.preprocess)?;
        if p.discarded {
            discarded += 1;
            continue;
        }
        let tdsg = synth.tdsg(&p)?.u;
        per_device.entry(m.device_id).or_default().push(Frame {
            device: m.device_id,
            raw: m.h.clone(),
            cim: p.h_tilde,
            tdsg,
        });
    }

    let (mut train, mut test, mut unknown) = (Vec::new(), Vec::new(), Vec::new());
    for (device, frames) in per_device {
        let mut idx: Vec<usize> = (0..frames.len()).collect();
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            TAG_SPLIT,
            device as u64,
            0,
        )));
        let k = (plan.train_fraction * frames.len() as f64).round() as usize;
        let (tr, te) = idx.split_at(k);
        if plan.registered_devices.contains(&device) {
            train.extend(tr.iter().map(|&i| frames[i].clone()));
            test.extend(te.iter().map(|&i| frames[i].clone()));
        } else {
            // Unknown devices contribute the same share a registered one tests on.
            unknown.extend(te.iter().map(|&i| frames[i].clone()));
        }
    }
    for d in &plan.registered_devices {
        if !train.iter().any(|f| f.device == *d) || !test.iter().any(|f| f.device == *d) {
            return Err(Error::invalid(format!("device {d} has no frames left in one of the splits")));
        }
    }

    let source = if need_source {
        let mut sc = DatasetConfig::new(
            plan.source_devices,
            plan.source_frames_per_device,
            plan.snr_db,
            derive_seed(seed, TAG_SOURCE_DATA, 0, 0),
        );
        sc.first_device_id = SOURCE_FIRST_DEVICE;
        sc.channel = plan.source_channel;
        sc.ranges = plan.ranges;
        let sds = generate_dataset(&sc)?;
        LabeledFeatureSet::from_frames(sds.iq.iter().map(|f| (f.v.as_slice(), f.device_id)), InputMode::TimeDomain)?
    } else {
        LabeledFeatureSet {
            mode: InputMode::TimeDomain,
            classes: Vec::new(),
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    };
    Ok(SeedData {
        train,
        test,
        unknown,
        discarded,
        source,
    })
}

fn feature_set(frames: &[Frame], mode: InputMode, classes: &[u32], unknown_label: Option<usize>) -> Result<LabeledFeatureSet> {
    LabeledFeatureSet::with_classes(frames.iter().map(|f| (f.input(mode), f.device)), mode, classes, unknown_label)
}

fn sorted(devices: &[u32]) -> Vec<u32> {
    let mut v = devices.to_vec();
    v.sort_unstable();
    v
}

fn train_rung(
    plan: &ExperimentPlan,
    flags: PipelineFlags,
    data: &SeedData,
    source: Option<&SourceModel>,
    seed: u64,
) -> Result<(TargetModel, LabeledFeatureSet)> {
    let mode = flags.input_mode();
    let classes = sorted(&plan.registered_devices);
    let train = feature_set(&data.train, mode, &classes, None)?;
    let cfg = plan.train_config(seed);
    let (model, _) = train_target(&train, if flags.aliq { source } else { None }, &cfg)?;
    Ok((model, train))
}

fn predict_labels(preds: &[Prediction]) -> Vec<usize> {
    preds.iter().map(Prediction::argmax).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub discarded: usize,
    pub train_frames: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungReport {
    pub name: String,
    pub flags: PipelineFlags,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rungs: Vec<RungReport>,
    /// Source training accuracy per seed, when a source model was trained.
    pub source_train_accuracy: Vec<f64>,
}

impl AblationReport {
    pub fn means(&self) -> Vec<f64> {
        self.rungs.iter().map(|r| r.mean_accuracy).collect()
    }

    pub fn strictly_increasing(&self) -> bool {
        self.means().windows(2).all(|w| w[1] > w[0])
    }

    pub fn spread(&self) -> f64 {
        let m = self.means();
        m.last().copied().unwrap_or(0.0) - m.first().copied().unwrap_or(0.0)
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn source_for(plan: &ExperimentPlan, data: &SeedData, seed: u64) -> Result<(SourceModel, f64)> {
    let (source, _) = train_source(&data.source, &plan.train_config(seed))?;
    let preds: Vec<Prediction> = data
        .source
        .inputs
        .iter()
        .map(|x| source.predict(x))
        .collect::<Result<_>>()?;
    Ok((source, crate::train::accuracy(&preds, &data.source.labels)))
}

/// Runs the four nested configurations on closed-world data.
pub fn run_ablation(plan: &ExperimentPlan) -> Result<AblationReport> {
    run_configurations(plan, &PipelineFlags::ladder())
}

/// Runs arbitrary closed-world configurations with shared seeds and data.
pub fn run_configurations(plan: &ExperimentPlan, configs: &[PipelineFlags]) -> Result<AblationReport> {
    let mut plan = plan.clone();
    plan.mode = Mode::Closed;
    plan.unknown_devices.clear();
    plan.validate()?;
    for f in configs {
        f.validate()?;
    }
    let classes = sorted(&plan.registered_devices);
    let mut per_rung: Vec<Vec<SeedResult>> = vec![Vec::new(); configs.len()];
    let mut source_acc = Vec::new();
    for &seed in &plan.seeds {
        let need_source = configs.iter().any(|f| f.aliq);
        let data = prepare_seed(&plan, seed, need_source)?;
        let source = if need_source {
            let (s, acc) = source_for(&plan, &data, seed)?;
            source_acc.push(acc);
            Some(s)
        } else {
            None
        };
        for (slot, &flags) in per_rung.iter_mut().zip(configs) {
            let (model, train) = train_rung(&plan, flags, &data, source.as_ref(), seed)?;
            let test = feature_set(&data.test, flags.input_mode(), &classes, None)?;
            let preds = model.predict_set(&test)?;
            slot.push(SeedResult {
                seed,
                discarded: data.discarded,
                train_frames: train.len(),
                metrics: compute_metrics(&predict_labels(&preds), &test.labels, classes.len())?,
            });
        }
    }
    let rungs = configs
        .iter()
        .zip(per_rung)
        .map(|(flags, per_seed)| RungReport {
            name: flags.name(),
            flags: *flags,
            mean_accuracy: mean(per_seed.iter().map(|s| s.metrics.accuracy)),
            mean_macro_f1: mean(per_seed.iter().map(|s| s.metrics.macro_f1)),
            per_seed,
        })
        .collect();
    Ok(AblationReport {
        rungs,
        source_train_accuracy: source_acc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenWorldSeed {
    pub seed: u64,
    pub openmax: MetricsReport,
    pub softmax: MetricsReport,
    pub unknown_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenWorldReport {
    pub delta: f64,
    pub flags: PipelineFlags,
    pub mean_openmax_accuracy: f64,
    pub mean_softmax_accuracy: f64,
    pub mean_unknown_recall: f64,
    pub per_seed: Vec<OpenWorldSeed>,
}

/// Open-set decisions for a labelled stream whose unknown frames carry
/// label `I`.
pub fn evaluate_open(
    model: &TargetModel,
    calib: &CalibrationFile,
    test: &LabeledFeatureSet,
    delta: f64,
) -> Result<(MetricsReport, MetricsReport)> {
    let n = model.classes.len();
    let preds = model.predict_set(test)?;
    let open: Vec<usize> = preds
        .iter()
        .map(|p| calib.calibrate(p, delta).map(|c| c.decision))
        .collect::<Result<_>>()?;
    let soft = predict_labels(&preds);
    Ok((
        compute_metrics(&open, &test.labels, n + 1)?,
        compute_metrics(&soft, &test.labels, n + 1)?,
    ))
}

/// Closed-world metrics of a model on a labelled set.
pub fn evaluate_closed(model: &TargetModel, test: &LabeledFeatureSet) -> Result<MetricsReport> {
    let preds = model.predict_set(test)?;
    compute_metrics(&predict_labels(&preds), &test.labels, model.classes.len())
}

/// Fits the per-class Weibull models on a model's training predictions.
pub fn calibrate_model(model: &TargetModel, train: &LabeledFeatureSet, tail_size: usize, delta: f64) -> Result<CalibrationFile> {
    let preds = model.predict_set(train)?;
    let groups = correct_activations(&preds, &train.labels, model.classes.len());
    Ok(CalibrationFile {
        classes: model.classes.clone(),
        tail_size,
        delta,
        calibrations: fit_calibration(&groups, tail_size)?,
    })
}

/// Trains on registered devices only and tests on a stream mixing their
/// held-out frames with frames of unknown devices.
pub fn run_open_world(plan: &ExperimentPlan, delta: f64) -> Result<OpenWorldReport> {
    let mut plan = plan.clone();
    plan.mode = Mode::Open;
    plan.validate()?;
    let flags = plan.pipeline;
    let classes = sorted(&plan.registered_devices);
    let unknown_label = classes.len();
    let mut per_seed = Vec::new();
    for &seed in &plan.seeds {
        let data = prepare_seed(&plan, seed, flags.aliq)?;
        let source = if flags.aliq {
            Some(source_for(&plan, &data, seed)?.0)
        } else {
            None
        };
        let (model, train) = train_rung(&plan, flags, &data, source.as_ref(), seed)?;
        let calib = calibrate_model(&model, &train, plan.tail_size, delta)?;
        let stream: Vec<Frame> = data.test.iter().chain(&data.unknown).cloned().collect();
        let test = feature_set(&stream, flags.input_mode(), &classes, Some(unknown_label))?;
        let (openmax, softmax) = evaluate_open(&model, &calib, &test, delta)?;
        let unknown_recall = openmax.recall(unknown_label).unwrap_or(0.0);
        per_seed.push(OpenWorldSeed {
            seed,
            openmax,
            softmax,
            unknown_recall,
        });
    }
    Ok(OpenWorldReport {
        delta,
        flags,
        mean_openmax_accuracy: mean(per_seed.iter().map(|s| s.openmax.accuracy)),
        mean_softmax_accuracy: mean(per_seed.iter().map(|s| s.softmax.accuracy)),
        mean_unknown_recall: mean(per_seed.iter().map(|s| s.unknown_recall)),
        per_seed,
    })
}

/// Horizontal-axis bar chart of ladder accuracies.
pub fn ablation_svg(report: &AblationReport) -> String {
    let (w, h, pad) = (120 * report.rungs.len().max(1) + 80, 320, 40);
    let plot_h = (h - 2 * pad) as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    writeln!(svg, "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - pad, w - pad / 2, h - pad).unwrap();
    for (i, r) in report.rungs.iter().enumerate() {
        let bh = r.mean_accuracy.clamp(0.0, 1.0) * plot_h;
        let x = pad + 20 + i * 120;
        let y = (h - pad) as f64 - bh;
        writeln!(svg, "<rect x=\"{x}\" y=\"{y:.1}\" width=\"80\" height=\"{bh:.1}\" fill=\"#4a7ab5\"/>").unwrap();
        writeln!(svg, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"middle\">{:.2}%</text>", x + 40, y - 4.0, 100.0 * r.mean_accuracy).unwrap();
        writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x + 40, h - pad + 16, r.name).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `metrics.json`, one confusion CSV per rung and seed, and `ladder.svg`.
pub fn write_ablation_report(report: &AblationReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)? + "\n")?;
    for r in &report.rungs {
        for s in &r.per_seed {
            let name = format!("confusion_{}_seed{}.csv", r.name.replace('+', "-"), s.seed);
            fs::write(dir.join(name), s.metrics.confusion_csv())?;
        }
    }
    fs::write(dir.join("ladder.svg"), ablation_svg(report))?;
    Ok(())
}

/// Writes `metrics.json` and `confusion.csv` for a single evaluation.
pub fn write_metrics(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(dir.join("confusion.csv"), report.confusion_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ArchConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions() {
        let t = vec![0, 1, 2, 2, 1];
        let m = compute_metrics(&t, &t, 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn binary_hand_example() {
        let m = compute_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert!((m.per_class_f1[0].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.per_class_f1[1].unwrap() - 0.8).abs() < 1e-12);
        assert!((m.macro_f1 - 11.0 / 15.0).abs() < 1e-12);
        assert_eq!(m.confusion, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn unsupported_classes_leave_the_average() {
        let m = compute_metrics(&[0, 2, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(m.per_class_f1[2], None);
        let expected = (1.0 + 2.0 / 3.0) / 2.0;
        assert!((m.macro_f1 - expected).abs() < 1e-12);
    }

    #[test]
    fn metric_errors() {
        assert!(compute_metrics(&[0], &[0, 1], 2).is_err());
        assert!(compute_metrics(&[], &[], 2).is_err());
        assert!(compute_metrics(&[3], &[0], 2).is_err());
    }

    #[test]
    fn random_guessing_approaches_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let classes = 7;
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let m = compute_metrics(&p, &t, classes).unwrap();
        assert!((m.accuracy - 1.0 / classes as f64).abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn confusion_conserves_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        let p: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        let m = compute_metrics(&p, &t, 4).unwrap();
        assert_eq!(m.confusion.iter().flatten().sum::<usize>(), 500);
        for c in 0..4 {
            assert_eq!(m.confusion[c].iter().sum::<usize>(), t.iter().filter(|&&x| x == c).count());
        }
        let trace: usize = (0..4).map(|i| m.confusion[i][i]).sum();
        assert!((m.accuracy - trace as f64 / 500.0).abs() < 1e-15);
        assert!(m.macro_f1 >= 0.0 && m.macro_f1 <= 1.0);
        let csv = m.confusion_csv();
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn plan_validation() {
        assert!(ExperimentPlan::default().validate().is_ok());
        assert!(ExperimentPlan::open_world().validate().is_ok());
        let mut p = ExperimentPlan::open_world();
        p.unknown_devices = vec![3];
        assert!(p.validate().is_err());
        let mut p = ExperimentPlan::open_world();
        p.unknown_devices.clear();
        assert!(p.validate().is_err());
        let mut p = ExperimentPlan::default();
        p.pipeline.cim = false;
        assert!(p.validate().is_err());
        let json = serde_json::to_string(&ExperimentPlan::default()).unwrap();
        let back: ExperimentPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ExperimentPlan::default());
        let partial: ExperimentPlan = serde_json::from_str(r#"{"seeds": [7]}"#).unwrap();
        assert_eq!(partial.seeds, vec![7]);
        assert_eq!(partial.frames_per_device, 300);
    }

    #[test]
    fn ladder_names() {
        let names: Vec<String> = PipelineFlags::ladder().iter().map(|f| f.name()).collect();
        assert_eq!(names, ["raw", "CIM", "CIM+TDSG", "CIM+TDSG+ALIQ"]);
    }

    fn small_plan() -> ExperimentPlan {
        let mut plan = ExperimentPlan {
            registered_devices: vec![0, 1, 2],
            frames_per_device: 20,
            seeds: vec![4],
            source_devices: 3,
            source_frames_per_device: 6,
            ..ExperimentPlan::default()
        };
        plan.train.arch = ArchConfig {
            kernel: 3,
            dilations: vec![1, 2],
            widths: vec![4, 4],
            hidden: 8,
        };
        plan.train.epochs_source = 2;
        plan.train.epochs_target = 2;
        plan.train.lr_target = 1e-3;
        plan
    }

    #[test]
    fn identical_devices_give_chance_on_every_rung() {
        let mut plan = small_plan();
        plan.ranges = ImpairmentRanges::identical();
        plan.frames_per_device = 60;
        // A seed whose two registered devices are well separated.
        plan.seeds = vec![2];
        let report = run_ablation(&plan).unwrap();
        for r in &report.rungs {
            assert!(r.mean_accuracy < 1.0 / 3.0 + 0.2, "{} {}", r.name, r.mean_accuracy);
        }
    }

    #[test]
    fn ablation_is_reproducible() {
        let plan = small_plan();
        let a = run_ablation(&plan).unwrap();
        let b = run_ablation(&plan).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.rungs.len(), 4);
        for r in &a.rungs {
            let m = &r.per_seed[0].metrics;
            assert_eq!(m.total, m.confusion.iter().flatten().sum::<usize>());
        }
        let svg = ablation_svg(&a);
        assert!(svg.starts_with("<svg") && svg.contains("CIM+TDSG+ALIQ"));
    }

    #[test]
    fn open_world_delta_boundaries() {
        let mut plan = small_plan();
        plan.mode = Mode::Open;
        plan.unknown_devices = vec![3];
        plan.pipeline = PipelineFlags {
            cim: true,
            tdsg: false,
            aliq: false,
            openmax: true,
        };
        plan.registered_devices = vec![0, 1];
        plan.unknown_devices = vec![2];
        plan.frames_per_device = 60;
        // A seed whose two registered devices are well separated.
        plan.seeds = vec![2];
        plan.train.arch.widths = vec![8, 8];
        plan.train.epochs_target = 30;
        plan.train.lr_target = 1e-2;
        plan.tail_size = 2;
        // delta = 1 never rejects, so unknown frames are always wrong.
        let never = run_open_world(&plan, 1.0).unwrap();
        assert_eq!(never.mean_unknown_recall, 0.0);
        assert!(never.per_seed[0].openmax.confusion.iter().all(|row| row[2] == 0));
        // delta = 0 rejects every frame carrying any uncertainty.
        let always = run_open_world(&plan, 0.0).unwrap();
        let m = &always.per_seed[0].openmax;
        let unknown_col: usize = m.confusion.iter().map(|row| row[2]).sum();
        assert!(unknown_col as f64 >= 0.9 * m.total as f64);
        assert_eq!(always.mean_unknown_recall, 1.0);
    }
}
