//! `csi2q` command-line front end.
//!
//! Every subcommand reads and writes files only. Failures print a JSON
//! object `{"error": <kind>, "message": <text>}` on stderr and exit with
//! status 1; argument errors exit with status 2.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use csi2q::container::{ContainerKind, DatasetContainer};
use csi2q::csi::{preprocess_frame, CsiMeasurement, PreprocessConfig};
use csi2q::eval::{self, ExperimentPlan, Mode};
use csi2q::openmax::CalibrationFile;
use csi2q::neural::{InputMode, ModelBundle};
use csi2q::preamble::Synthesizer;
use csi2q::sim::{generate_dataset, DatasetConfig};
use csi2q::train::{train_source, train_target, LabeledFeatureSet, SourceModel, TargetModel, TrainConfig};
use csi2q::{Error, Result};

#[derive(Parser)]
#[command(name = "csi2q", version, about = "Radio fingerprinting from CSI via synthesized IQ preambles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Csi,
    Iq,
}

impl From<KindArg> for ContainerKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Csi => ContainerKind::Csi,
            KindArg::Iq => ContainerKind::Iq,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    TimeDomain,
    Csi,
    AmplitudePhase,
}

impl From<ModeArg> for InputMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TimeDomain => InputMode::TimeDomain,
            ModeArg::Csi => InputMode::Csi,
            ModeArg::AmplitudePhase => InputMode::AmplitudePhase,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate paired IQ and CSI containers plus a manifest.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        /// JSON dataset configuration; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        devices: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        first_device: Option<u32>,
        #[arg(long, env = "CSI2Q_SEED")]
        seed: Option<u64>,
    },
    /// Jitter correction and cyclic shift division; discarded frames are dropped.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_jitters: Option<usize>,
    },
    /// Synthesize 320-sample time-domain features from processed CSI.
    Transform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source extractor and discriminator on IQ frames.
    TrainSource {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "CSI2Q_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train the target model, optionally guided by a source bundle.
    TrainTarget {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Input encoding; inferred from the container kind when omitted.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "CSI2Q_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fit per-class Weibull models on the model's training frames.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = csi2q::openmax::DEFAULT_TAIL_SIZE)]
        tail_size: usize,
        #[arg(long, default_value_t = csi2q::openmax::DEFAULT_DELTA)]
        delta: f64,
    },
    /// Score a model on labelled frames; with a calibration file, devices
    /// outside the model's classes count as unknown.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Overrides the threshold stored in the calibration file.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Run the ablation ladder (closed plans) or the open-world protocol.
    Ablate {
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the plan's seed list with this single seed.
        #[arg(long, env = "CSI2Q_SEED")]
        seed: Option<u64>,
    },
    /// Convert a CSV file into a binary container.
    ImportCsv {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
    },
    /// Convert a binary container into CSV.
    ExportCsv {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

fn mode_for(container: &DatasetContainer, mode: Option<ModeArg>) -> Result<InputMode> {
    let mode = mode.map(InputMode::from).unwrap_or(match container.kind {
        ContainerKind::Iq => InputMode::TimeDomain,
        ContainerKind::Csi => InputMode::Csi,
    });
    if mode.length() != container.kind.frame_length() {
        return Err(Error::InvalidInput(format!(
            "{mode:?} inputs need {}-sample frames, container holds {}",
            mode.length(),
            container.kind.frame_length()
        )));
    }
    Ok(mode)
}

fn labelled(container: &DatasetContainer, mode: InputMode) -> Result<LabeledFeatureSet> {
    LabeledFeatureSet::from_frames(
        container.frames.iter().map(|f| (f.samples.as_slice(), f.device_id)),
        mode,
    )
}

fn train_config(config: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_trace(trace: &csi2q::train::TrainTrace, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        trace.write_csv(fs::File::create(p)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDataset {
            out,
            config,
            devices,
            frames,
            snr_db,
            first_device,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => read_json(&p)?,
                None => DatasetConfig::new(10, 300, 20.0, 0),
            };
            cfg.num_devices = devices.unwrap_or(cfg.num_devices);
            cfg.frames_per_device = frames.unwrap_or(cfg.frames_per_device);
            cfg.snr_db = snr_db.unwrap_or(cfg.snr_db);
            cfg.first_device_id = first_device.unwrap_or(cfg.first_device_id);
            cfg.master_seed = seed.unwrap_or(cfg.master_seed);
            let ds = generate_dataset(&cfg)?;
            fs::create_dir_all(&out)?;
            let mut iq = DatasetContainer::new(ContainerKind::Iq);
            for f in &ds.iq {
                iq.push(f.device_id, f.v.clone())?;
            }
            let mut csi = DatasetContainer::new(ContainerKind::Csi);
            for m in &ds.csi {
                csi.push(m.device_id, m.h.clone())?;
            }
            iq.save(out.join("iq.bin"))?;
            csi.save(out.join("csi.bin"))?;
            let mut manifest = ds.manifest;
            manifest.files.insert("iq".into(), "iq.bin".into());
            manifest.files.insert("csi".into(), "csi.bin".into());
            manifest.save(out.join("manifest.json"))?;
            fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
            print(json!({"frames": iq.len(), "devices": cfg.num_devices, "config_hash": manifest.config_hash}));
        }
        Command::Preprocess { input, out, max_jitters } => {
            let c = DatasetContainer::load(&input)?;
            if c.kind != ContainerKind::Csi {
                return Err(Error::InvalidInput("preprocess expects a CSI container".into()));
            }
            let mut cfg = PreprocessConfig::default();
            cfg.max_jitters = max_jitters.unwrap_or(cfg.max_jitters);
            let mut kept = DatasetContainer::new(ContainerKind::Csi);
            let mut discarded = Vec::new();
            for (i, f) in c.frames.iter().enumerate() {
                let p = preprocess_frame(&CsiMeasurement::new(f.samples.clone(), f.device_id)?, &cfg)?;
                if p.discarded {
                    discarded.push(json!({"index": i, "device": f.device_id, "reason": p.discard_reason}));
                } else {
                    kept.push(f.device_id, p.h_tilde)?;
                }
            }
            kept.save(&out)?;
            print(json!({"kept": kept.len(), "discarded": discarded}));
        }
        Command::Transform { input, out } => {
            let c = DatasetContainer::load(&input)?;
            if c.kind != ContainerKind::Csi {
                return Err(Error::InvalidInput("transform expects a processed CSI container".into()));
            }
            let synth = Synthesizer::default();
            let mut feats = DatasetContainer::new(ContainerKind::Iq);
            for f in &c.frames {
                feats.push(f.device_id, synth.synthesize(&f.samples)?)?;
            }
            feats.save(&out)?;
            print(json!({"frames": feats.len()}));
        }
        Command::TrainSource {
            input,
            out,
            config,
            seed,
            trace,
        } => {
            let c = DatasetContainer::load(&input)?;
            let set = labelled(&c, mode_for(&c, Some(ModeArg::TimeDomain))?)?;
            let cfg = train_config(config.as_deref(), seed)?;
            let (model, tr) = train_source(&set, &cfg)?;
            model.to_bundle(&cfg).save(&out)?;
            write_trace(&tr, trace.as_deref())?;
            print(json!({"classes": model.classes, "final_loss": tr.rows.last().map(|r| r.loss_source)}));
        }
        Command::TrainTarget {
            input,
            out,
            mode,
            source,
            config,
            seed,
            trace,
        } => {
            let c = DatasetContainer::load(&input)?;
            let set = labelled(&c, mode_for(&c, mode)?)?;
            let cfg = train_config(config.as_deref(), seed)?;
            let source = source
                .map(|p| SourceModel::from_bundle(&ModelBundle::load(p)?))
                .transpose()?;
            let (model, tr) = train_target(&set, source.as_ref(), &cfg)?;
            model.to_bundle(&cfg).save(&out)?;
            write_trace(&tr, trace.as_deref())?;
            print(json!({"classes": model.classes, "final_loss": tr.rows.last().map(|r| r.loss_target)}));
        }
        Command::Calibrate {
            model,
            input,
            out,
            tail_size,
            delta,
        } => {
            let model = TargetModel::from_bundle(&ModelBundle::load(model)?)?;
            let c = DatasetContainer::load(&input)?;
            let set = LabeledFeatureSet::with_classes(
                c.frames.iter().map(|f| (f.samples.as_slice(), f.device_id)),
                model.mode,
                &model.classes,
                None,
            )?;
            let calib = eval::calibrate_model(&model, &set, tail_size, delta)?;
            calib.save(&out)?;
            print(json!({"classes": calib.classes, "tail_size": tail_size, "delta": delta}));
        }
        Command::Evaluate {
            model,
            input,
            out,
            calibration,
            delta,
        } => {
            let model = TargetModel::from_bundle(&ModelBundle::load(model)?)?;
            let c = DatasetContainer::load(&input)?;
            let frames = c.frames.iter().map(|f| (f.samples.as_slice(), f.device_id));
            let report = match calibration {
                Some(p) => {
                    let calib = CalibrationFile::load(&p)?;
                    if calib.classes != model.classes {
                        return Err(Error::ModelMismatch("calibration classes differ from the model's".into()));
                    }
                    let unknown = model.classes.len();
                    let set = LabeledFeatureSet::with_classes(frames, model.mode, &model.classes, Some(unknown))?;
                    let (open, soft) = eval::evaluate_open(&model, &calib, &set, delta.unwrap_or(calib.delta))?;
                    eval::write_metrics(&soft, out.join("softmax"))?;
                    open
                }
                None => {
                    let set = LabeledFeatureSet::with_classes(frames, model.mode, &model.classes, None)?;
                    eval::evaluate_closed(&model, &set)?
                }
            };
            eval::write_metrics(&report, &out)?;
            print(json!({"accuracy": report.accuracy, "macro_f1": report.macro_f1}));
        }
        Command::Ablate { plan, out, seed } => {
            let mut plan = match plan {
                Some(p) => ExperimentPlan::load(p)?,
                None => ExperimentPlan::default(),
            };
            if let Some(s) = seed {
                plan.seeds = vec![s];
            }
            match plan.mode {
                Mode::Closed => {
                    let report = eval::run_ablation(&plan)?;
                    eval::write_ablation_report(&report, &out)?;
                    let summary: Vec<_> = report
                        .rungs
                        .iter()
                        .map(|r| json!({"name": r.name, "accuracy": r.mean_accuracy, "macro_f1": r.mean_macro_f1}))
                        .collect();
                    print(json!({"rungs": summary}));
                }
                Mode::Open => {
                    let report = eval::run_open_world(&plan, plan.delta)?;
                    fs::create_dir_all(&out)?;
                    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
                    for s in &report.per_seed {
                        fs::write(out.join(format!("confusion_openmax_seed{}.csv", s.seed)), s.openmax.confusion_csv())?;
                        fs::write(out.join(format!("confusion_softmax_seed{}.csv", s.seed)), s.softmax.confusion_csv())?;
                    }
                    print(json!({
                        "openmax_accuracy": report.mean_openmax_accuracy,
                        "softmax_accuracy": report.mean_softmax_accuracy,
                        "unknown_recall": report.mean_unknown_recall,
                    }));
                }
            }
        }
        Command::ImportCsv { input, out, kind } => {
            let c = DatasetContainer::from_csv(kind.into(), fs::File::open(&input)?)?;
            c.save(&out)?;
            print(json!({"frames": c.len()}));
        }
        Command::ExportCsv { input, out } => {
            let c = DatasetContainer::load(&input)?;
            c.to_csv(fs::File::create(&out)?)?;
            print(json!({"frames": c.len()}));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}

