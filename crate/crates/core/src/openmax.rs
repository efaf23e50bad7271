//! Open-set recognition by Weibull calibration of class activations.
//!
//! For each known class the mean activation vector (MAV) of correctly
//! classified training frames is stored together with a two-parameter
//! Weibull model of the largest distances to that MAV. At inference the
//! Weibull CDF of a frame's distance to each MAV discounts the class
//! probability, and the discounted mass becomes the "unknown" score.
//!
//! Class decisions are 0-based: `0..I` are the registered classes and `I`
//! means unknown.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{argmax, Prediction};

pub const DEFAULT_TAIL_SIZE: usize = 20;
pub const DEFAULT_DELTA: f64 = 0.15;
/// Minimum number of correctly classified frames per class.
pub const MIN_CLASS_SAMPLES: usize = 5;

const SHAPE_TOL: f64 = 1e-8;

/// Two-parameter Weibull distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weibull {
    pub shape: f64,
    pub scale: f64,
}

impl Weibull {
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        1.0 - (-(x / self.scale).powf(self.shape)).exp()
    }
}

/// Maximum-likelihood Weibull fit.
///
/// Solves the profile-likelihood equation for the shape with a bracketed
/// Newton iteration, then takes the closed-form scale.
pub fn weibull_fit(samples: &[f64]) -> Result<Weibull> {
    if samples.len() < 2 {
        return Err(Error::DegenerateFit(format!("need at least 2 samples, got {}", samples.len())));
    }
    if let Some(x) = samples.iter().find(|x| !x.is_finite() || **x <= 0.0) {
        return Err(Error::DegenerateFit(format!("samples must be positive and finite, found {x}")));
    }
    let max = samples.iter().cloned().fold(0.0, f64::max);
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    if (max - min) <= 1e-12 * max {
        return Err(Error::DegenerateFit("samples have zero spread".into()));
    }
    // Shape is scale invariant; work on x / max so powers stay in (0, 1].
    let logs: Vec<f64> = samples.iter().map(|x| (x / max).ln()).collect();
    let n = logs.len() as f64;
    let mean_log = logs.iter().sum::<f64>() / n;

    // g(k) = sum(x^k ln x) / sum(x^k) - 1/k - mean(ln x), increasing in k.
    let eval = |k: f64| {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &l in &logs {
            let w = (k * l).exp();
            s0 += w;
            s1 += w * l;
            s2 += w * l * l;
        }
        let g = s1 / s0 - 1.0 / k - mean_log;
        let dg = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k);
        (g, dg)
    };

    let (mut lo, mut hi) = (1.0, 1.0);
    while eval(lo).0 > 0.0 {
        lo /= 2.0;
        if lo < 1e-6 {
            return Err(Error::DegenerateFit("shape parameter collapsed towards zero".into()));
        }
    }
    while eval(hi).0 < 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::DegenerateFit("shape parameter diverged".into()));
        }
    }
    let mut k = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (g, dg) = eval(k);
        if g.abs() < SHAPE_TOL {
            break;
        }
        if g < 0.0 {
            lo = k;
        } else {
            hi = k;
        }
        let newton = k - g / dg;
        k = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-14 * hi {
            break;
        }
    }
    let mean_pow = logs.iter().map(|&l| (k * l).exp()).sum::<f64>() / n;
    let scale = max * mean_pow.powf(1.0 / k);
    if !(k.is_finite() && scale.is_finite() && k > 0.0 && scale > 0.0) {
        return Err(Error::DegenerateFit(format!("non-finite estimate shape {k}, scale {scale}")));
    }
    Ok(Weibull { shape: k, scale })
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCalibration {
    pub mav: Vec<f64>,
    pub weibull_shape: f64,
    pub weibull_scale: f64,
    pub tail_size: usize,
}

impl ClassCalibration {
    pub fn weibull(&self) -> Weibull {
        Weibull {
            shape: self.weibull_shape,
            scale: self.weibull_scale,
        }
    }

    /// Probability that an in-class frame lies closer than `activation`.
    pub fn outlier_probability(&self, activation: &[f64]) -> f64 {
        self.weibull().cdf(euclidean(activation, &self.mav)).clamp(0.0, 1.0)
    }
}

/// Fits one calibration per class from that class's correctly classified
/// activation vectors.
pub fn fit_calibration(per_class: &[Vec<Vec<f64>>], tail_size: usize) -> Result<Vec<ClassCalibration>> {
    if tail_size < 2 {
        return Err(Error::invalid("tail size must be at least 2"));
    }
    let needed = tail_size.max(MIN_CLASS_SAMPLES);
    per_class
        .iter()
        .enumerate()
        .map(|(class, acts)| {
            if acts.len() < needed {
                return Err(Error::Calibration {
                    class,
                    reason: format!("{} correctly classified samples, need {needed}", acts.len()),
                });
            }
            let dim = acts[0].len();
            if acts.iter().any(|a| a.len() != dim) {
                return Err(Error::Calibration {
                    class,
                    reason: "activation vectors differ in length".into(),
                });
            }
            let mut mav = vec![0.0; dim];
            for a in acts {
                for (m, v) in mav.iter_mut().zip(a) {
                    *m += v;
                }
            }
            mav.iter_mut().for_each(|m| *m /= acts.len() as f64);
            let mut dist: Vec<f64> = acts.iter().map(|a| euclidean(a, &mav)).collect();
            dist.sort_by(|a, b| b.total_cmp(a));
            let tail = &dist[..tail_size];
            if tail[0] == 0.0 {
                return Err(Error::DegenerateFit(format!(
                    "class {class}: all activations coincide with the mean"
                )));
            }
            let w = weibull_fit(tail).map_err(|e| match e {
                Error::DegenerateFit(msg) => Error::DegenerateFit(format!("class {class}: {msg}")),
                other => other,
            })?;
            Ok(ClassCalibration {
                mav,
                weibull_shape: w.shape,
                weibull_scale: w.scale,
                tail_size,
            })
        })
        .collect()
}

/// Groups activations of frames whose argmax equals their label.
pub fn correct_activations(predictions: &[Prediction], labels: &[usize], num_classes: usize) -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); num_classes];
    for (p, &l) in predictions.iter().zip(labels) {
        if l < num_classes && p.argmax() == l {
            out[l].push(p.activations.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPrediction {
    /// `I + 1` entries; the last is the unknown mass.
    pub g_vector: Vec<f64>,
    pub unknown_mass: f64,
    /// `0..I` for a registered class, `I` for unknown.
    pub decision: usize,
}

/// Builds the calibrated vector from class probabilities `p` and per-class
/// confidences `c` in `[0, 1]`.
pub fn calibrate_with_confidence(p: &[f64], c: &[f64], delta: f64) -> Result<CalibratedPrediction> {
    if p.len() != c.len() || p.is_empty() {
        return Err(Error::invalid(format!(
            "need one confidence per class, got {} probabilities and {} confidences",
            p.len(),
            c.len()
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < 0.0) {
        return Err(Error::invalid(format!("probabilities must sum to 1, got {sum}")));
    }
    let mut g_vector: Vec<f64> = p.iter().zip(c).map(|(pi, ci)| pi * ci.clamp(0.0, 1.0)).collect();
    let unknown_mass: f64 = p.iter().zip(c).map(|(pi, ci)| pi * (1.0 - ci.clamp(0.0, 1.0))).sum();
    let decision = if unknown_mass > delta {
        p.len()
    } else {
        argmax(&g_vector)
    };
    g_vector.push(unknown_mass);
    Ok(CalibratedPrediction {
        g_vector,
        unknown_mass,
        decision,
    })
}

/// Calibrates one prediction against the fitted classes.
pub fn calibrate(p: &[f64], activation: &[f64], calib: &[ClassCalibration], delta: f64) -> Result<CalibratedPrediction> {
    if calib.len() != p.len() {
        return Err(Error::invalid(format!(
            "calibration covers {} classes, prediction has {}",
            calib.len(),
            p.len()
        )));
    }
    if let Some(bad) = calib.iter().position(|cc| cc.mav.len() != activation.len()) {
        return Err(Error::invalid(format!(
            "class {bad} MAV has dimension {}, activation has {}",
            calib[bad].mav.len(),
            activation.len()
        )));
    }
    let c: Vec<f64> = calib.iter().map(|cc| 1.0 - cc.outlier_probability(activation)).collect();
    calibrate_with_confidence(p, &c, delta)
}

/// Calibration file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    /// Device id of each class index.
    pub classes: Vec<u32>,
    pub tail_size: usize,
    pub delta: f64,
    pub calibrations: Vec<ClassCalibration>,
}

impl CalibrationFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.classes.len() != file.calibrations.len() {
            return Err(Error::Format("class list and calibrations differ in length".into()));
        }
        Ok(file)
    }

    pub fn calibrate(&self, prediction: &Prediction, delta: f64) -> Result<CalibratedPrediction> {
        calibrate(&prediction.probs, &prediction.activations, &self.calibrations, delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Weibull as WeibullDist};

    fn draws(shape: f64, scale: f64, n: usize, seed: u64) -> Vec<f64> {
        let d = WeibullDist::new(scale, shape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn cdf_reference_points() {
        let w = Weibull { shape: 2.0, scale: 1.0 };
        assert_eq!(w.cdf(0.0), 0.0);
        assert!((w.cdf(1.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!(w.cdf(50.0) > 1.0 - 1e-12);
    }

    #[test]
    fn fit_recovers_parameters() {
        for seed in 0..20 {
            let w = weibull_fit(&draws(2.0, 1.0, 500, seed)).unwrap();
            assert!((w.shape - 2.0).abs() / 2.0 < 0.15, "shape {}", w.shape);
            assert!((w.scale - 1.0).abs() < 0.15, "scale {}", w.scale);
        }
        let w = weibull_fit(&draws(0.8, 7.0, 2000, 3)).unwrap();
        assert!((w.shape - 0.8).abs() / 0.8 < 0.08);
        assert!((w.scale - 7.0).abs() / 7.0 < 0.08);
    }

    #[test]
    fn fit_satisfies_likelihood_equations() {
        let x = draws(3.0, 2.5, 300, 9);
        let w = weibull_fit(&x).unwrap();
        let n = x.len() as f64;
        let sk: f64 = x.iter().map(|v| v.powf(w.shape)).sum();
        let skl: f64 = x.iter().map(|v| v.powf(w.shape) * v.ln()).sum();
        let ml: f64 = x.iter().map(|v| v.ln()).sum::<f64>() / n;
        assert!((skl / sk - 1.0 / w.shape - ml).abs() < 1e-7);
        assert!((w.scale - (sk / n).powf(1.0 / w.shape)).abs() < 1e-9);
    }

    #[test]
    fn fit_is_scale_equivariant() {
        let x = draws(1.7, 1.0, 200, 4);
        let a = weibull_fit(&x).unwrap();
        let y: Vec<f64> = x.iter().map(|v| v * 1e3).collect();
        let b = weibull_fit(&y).unwrap();
        assert!((a.shape - b.shape).abs() < 1e-7 * a.shape);
        assert!((b.scale / a.scale - 1e3).abs() < 1e-4);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(weibull_fit(&[1.0; 10]), Err(Error::DegenerateFit(_))));
        assert!(matches!(weibull_fit(&[0.0, 1.0]), Err(Error::DegenerateFit(_))));
        assert!(weibull_fit(&[1.0]).is_err());
        let same = vec![vec![vec![0.3, -1.0]; 25]];
        assert!(matches!(fit_calibration(&same, 20), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn insufficient_samples_name_the_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let good: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random(), rng.random()]).collect();
        let few: Vec<Vec<f64>> = good[..4].to_vec();
        match fit_calibration(&[good, few], 20) {
            Err(Error::Calibration { class, .. }) => assert_eq!(class, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mav_is_class_mean_and_fit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cluster = |cx: f64| -> Vec<Vec<f64>> {
            (0..40)
                .map(|_| vec![cx + rng.random_range(-1.0..1.0), -cx + rng.random_range(-1.0..1.0)])
                .collect()
        };
        let data = vec![cluster(10.0), cluster(-10.0)];
        let cal = fit_calibration(&data, 20).unwrap();
        for (c, acts) in cal.iter().zip(&data) {
            for d in 0..2 {
                let mean = acts.iter().map(|a| a[d]).sum::<f64>() / acts.len() as f64;
                assert!((c.mav[d] - mean).abs() < 1e-9);
            }
            assert_eq!(c.tail_size, 20);
        }
        assert_eq!(cal, fit_calibration(&data, 20).unwrap());
        // Far-away activations look like outliers to both classes.
        assert!(cal[0].outlier_probability(&[100.0, 100.0]) > 0.999);
        assert!(cal[0].outlier_probability(&cal[0].mav.clone()) == 0.0);
    }

    #[test]
    fn calibration_examples() {
        let r = calibrate_with_confidence(&[0.6, 0.4], &[1.0, 1.0], DEFAULT_DELTA).unwrap();
        assert_eq!(r.g_vector, vec![0.6, 0.4, 0.0]);
        assert_eq!(r.decision, 0);

        let r = calibrate_with_confidence(&[0.6, 0.4], &[0.0, 0.0], DEFAULT_DELTA).unwrap();
        assert!((r.unknown_mass - 1.0).abs() < 1e-15);
        assert_eq!(r.decision, 2);

        let r = calibrate_with_confidence(&[0.6, 0.4], &[0.9, 0.5], DEFAULT_DELTA).unwrap();
        let expected = [0.54, 0.20, 0.26];
        for (g, e) in r.g_vector.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
        assert_eq!(r.decision, 2);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let r = calibrate_with_confidence(&[0.5, 0.5], &[1.0, 1.0], 0.15).unwrap();
        assert_eq!(r.decision, 0);
    }

    #[test]
    fn calibrate_checks_coverage() {
        let cc = ClassCalibration {
            mav: vec![0.0, 0.0],
            weibull_shape: 2.0,
            weibull_scale: 1.0,
            tail_size: 20,
        };
        assert!(calibrate(&[0.5, 0.5], &[0.0, 0.0], std::slice::from_ref(&cc), 0.15).is_err());
        let zero = calibrate(&[0.5, 0.5], &[0.0, 0.0], &[cc.clone(), cc.clone()], 0.15).unwrap();
        assert_eq!(zero.unknown_mass, 0.0);
        assert!(calibrate(&[0.7, 0.7], &[0.0, 0.0], &[cc.clone(), cc], 0.15).is_err());
    }

    #[test]
    fn calibration_file_round_trip() {
        let file = CalibrationFile {
            classes: vec![3, 7],
            tail_size: 20,
            delta: 0.15,
            calibrations: vec![
                ClassCalibration {
                    mav: vec![0.1, 0.2],
                    weibull_shape: 2.5,
                    weibull_scale: 0.7,
                    tail_size: 20,
                };
                2
            ],
        };
        let path = std::env::temp_dir().join(format!("csi2q-calib-{}.json", std::process::id()));
        file.save(&path).unwrap();
        assert_eq!(CalibrationFile::load(&path).unwrap(), file);
        fs::remove_file(&path).ok();
    }

    fn simplex_and_confidence() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(0.001f64..1.0, n),
                prop::collection::vec(0.0f64..=1.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn g_vector_preserves_probability_mass((raw, c) in simplex_and_confidence()) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let r = calibrate_with_confidence(&p, &c, DEFAULT_DELTA).unwrap();
            prop_assert!((r.g_vector.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.g_vector.iter().all(|&g| g >= 0.0));
            let never = calibrate_with_confidence(&p, &c, 1.0).unwrap();
            prop_assert!(never.decision < p.len());
            let always = calibrate_with_confidence(&p, &c, 0.0).unwrap();
            prop_assert_eq!(always.decision == p.len(), always.unknown_mass > 0.0);
        }

        #[test]
        fn larger_distance_never_lowers_unknown_mass(
            (raw, dist) in (2usize..8).prop_flat_map(|n| (
                prop::collection::vec(0.01f64..1.0, n),
                prop::collection::vec(0.0f64..4.0, n),
            )),
            pick in 0usize..8,
            extra in 0.0f64..3.0,
        ) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let w = Weibull { shape: 1.8, scale: 1.3 };
            let conf = |d: &[f64]| -> Vec<f64> { d.iter().map(|&x| 1.0 - w.cdf(x)).collect() };
            let j = pick % p.len();
            let mut moved = dist.clone();
            moved[j] += extra;
            let before = calibrate_with_confidence(&p, &conf(&dist), DEFAULT_DELTA).unwrap();
            let after = calibrate_with_confidence(&p, &conf(&moved), DEFAULT_DELTA).unwrap();
            prop_assert!(after.unknown_mass >= before.unknown_mass - 1e-15);
        }
    }
}
