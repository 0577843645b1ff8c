//! Segmentation and localization metrics: per-class Dice, precision and
//! recall, centroid error with a miss penalty, and descriptive statistics
//! with a percentile bootstrap interval.
//!
//! Metrics with a zero denominator are `None` and are left out of macro
//! averages.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::LabeledMesh;

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Face counts per class, for every class present in either labeling.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: BTreeMap<u8, ClassCounts>,
}

impl ConfusionCounts {
    pub fn get(&self, class: u8) -> ClassCounts {
        self.classes.get(&class).copied().unwrap_or_default()
    }
}

pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "label lengths differ: {} predicted, {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let mut classes: BTreeMap<u8, ClassCounts> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            classes.entry(p).or_default().tp += 1;
        } else {
            classes.entry(p).or_default().fp += 1;
            classes.entry(g).or_default().fn_ += 1;
        }
    }
    Ok(ConfusionCounts { classes })
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn dsc(counts: &ConfusionCounts, class: u8) -> Option<f64> {
    let c = counts.get(class);
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn precision_recall(counts: &ConfusionCounts, class: u8) -> (Option<f64>, Option<f64>) {
    let c = counts.get(class);
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// Mean of the defined values; `None` when none is defined.
pub fn macro_average(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub per_class: BTreeMap<u8, ClassMetrics>,
    pub macro_dsc: Option<f64>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
}

/// Per-class metrics of one scan and their macro averages.
pub fn label_metrics(pred: &[u8], gt: &[u8]) -> Result<LabelMetrics> {
    let counts = confusion(pred, gt)?;
    let per_class: BTreeMap<u8, ClassMetrics> = counts
        .classes
        .keys()
        .map(|&c| {
            let (precision, recall) = precision_recall(&counts, c);
            (
                c,
                ClassMetrics {
                    dsc: dsc(&counts, c),
                    precision,
                    recall,
                },
            )
        })
        .collect();
    Ok(LabelMetrics {
        macro_dsc: macro_average(per_class.values().map(|m| m.dsc)),
        macro_precision: macro_average(per_class.values().map(|m| m.precision)),
        macro_recall: macro_average(per_class.values().map(|m| m.recall)),
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidError {
    /// mm; the bounding-box diagonal when the prediction is empty.
    pub distance: f64,
    pub miss: bool,
}

/// Distance between the area-weighted centroids of two face sets.
pub fn centroid_error(mesh: &LabeledMesh, pred_faces: &[usize], gt_faces: &[usize], bbox_diag: f64) -> Result<CentroidError> {
    let gt = mesh
        .area_centroid_of(gt_faces.iter().copied())
        .ok_or_else(|| Error::InvalidArgument("ground-truth region is empty".into()))?;
    Ok(match mesh.area_centroid_of(pred_faces.iter().copied()) {
        Some(p) => CentroidError {
            distance: (p - gt).norm(),
            miss: false,
        },
        None => CentroidError {
            distance: bbox_diag,
            miss: true,
        },
    })
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95% percentile bootstrap interval of the mean.
///
/// Samples are sorted first so the interval does not depend on input order;
/// resample `b` draws from its own ChaCha8 stream, so the result does not
/// depend on the thread count.
pub fn bootstrap_ci(samples: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("bootstrap needs at least 2 samples".into()));
    }
    if resamples == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one resample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("bootstrap samples must be finite".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut means: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            (0..n).map(|_| sorted[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    Ok((percentile(&means, 0.025), percentile(&means, 0.975)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; undefined for a single sample.
    pub std: Option<f64>,
    pub median: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub miss_rate: f64,
}

pub fn summarize(samples: &[f64], misses: usize, resamples: usize, seed: u64) -> Result<MetricSummary> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot summarize an empty sample".into()));
    }
    if misses > n {
        return Err(Error::InvalidArgument(format!("{misses} misses among {n} samples")));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let ci = if n > 1 { Some(bootstrap_ci(samples, resamples, seed)?) } else { None };
    Ok(MetricSummary {
        n,
        mean,
        std,
        median,
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        miss_rate: misses as f64 / n as f64,
    })
}

/// Classes present in either labeling.
pub fn present_classes(pred: &[u8], gt: &[u8]) -> BTreeSet<u8> {
    pred.iter().chain(gt).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Point3, Vector3};
    use proptest::prelude::*;
    use rand::Rng;

    fn counts(tp: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts {
            classes: [(1, ClassCounts { tp, fp, fn_ })].into(),
        }
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let gt = [0, 1, 1, 2, 3];
        let c = confusion(&gt, &gt).unwrap();
        assert!(c.classes.values().all(|k| k.fp == 0 && k.fn_ == 0));
        assert_eq!(dsc(&c, 1), Some(1.0));
        assert_eq!(precision_recall(&c, 2), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn all_wrong_counts_by_hand() {
        let c = confusion(&[0; 10], &[1; 10]).unwrap();
        assert_eq!(c.get(1).fn_, 10);
        assert_eq!(c.get(0).fp, 10);
        assert_eq!(c.get(0).tp + c.get(1).tp, 0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(confusion(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn hand_examples() {
        assert_eq!(dsc(&counts(5, 0, 0), 1), Some(1.0));
        assert_eq!(dsc(&counts(3, 1, 2), 1), Some(6.0 / 9.0));
        assert_eq!(precision_recall(&counts(3, 1, 2), 1), (Some(0.75), Some(0.6)));
        assert_eq!(dsc(&counts(0, 4, 4), 1), Some(0.0));
        assert_eq!(precision_recall(&counts(0, 5, 0), 1).0, Some(0.0));
        assert_eq!(dsc(&counts(0, 0, 0), 1), None);
    }

    #[test]
    fn macro_average_skips_undefined() {
        assert_eq!(macro_average([Some(1.0), None, Some(0.5)]), Some(0.75));
        assert_eq!(macro_average([None, None]), None);
    }

    fn square_mesh() -> LabeledMesh {
        // Two unit squares: one at the origin, one centered at (3, 4, 0).
        let mut v = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (3.0, 4.0)] {
            for (dx, dy) in [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)] {
                v.push(Point3::new(cx + dx, cy + dy, 0.0));
            }
        }
        LabeledMesh::new(v, vec![[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]]).unwrap()
    }

    #[test]
    fn centroid_error_by_hand() {
        let m = square_mesh();
        assert_eq!(centroid_error(&m, &[0, 1], &[0, 1], 42.0).unwrap().distance, 0.0);
        let e = centroid_error(&m, &[2, 3], &[0, 1], 42.0).unwrap();
        assert!((e.distance - 5.0).abs() < 1e-12);
        assert!(!e.miss);
        let miss = centroid_error(&m, &[], &[0, 1], 42.0).unwrap();
        assert_eq!(miss, CentroidError { distance: 42.0, miss: true });
        assert!(centroid_error(&m, &[0], &[], 42.0).is_err());
    }

    #[test]
    fn centroid_error_is_rigid_invariant() {
        let m = square_mesh();
        let t = crate::mesh::RigidTransform::from_euler_deg(10.0, 20.0, 30.0, Vector3::new(1.0, 2.0, 3.0));
        let a = centroid_error(&m, &[2], &[0, 1], 1.0).unwrap().distance;
        let b = centroid_error(&m.transformed(&t), &[2], &[0, 1], 1.0).unwrap().distance;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn summary_by_hand() {
        let s = summarize(&[1.0, 2.0, 3.0], 0, 1000, 0).unwrap();
        assert_eq!((s.mean, s.std, s.median), (2.0, Some(1.0), 2.0));
        let one = summarize(&[4.0], 0, 1000, 0).unwrap();
        assert_eq!((one.mean, one.median, one.std), (4.0, 4.0, None));
        assert_eq!(summarize(&[1.0, 2.0, 3.0, 10.0], 0, 10, 0).unwrap().median, 2.5);
        let misses = summarize(&vec![0.3; 41], 2, 10, 0).unwrap();
        assert!((misses.miss_rate - 0.0488).abs() < 1e-4);
        assert!(summarize(&[], 0, 10, 0).is_err());
    }

    #[test]
    fn constant_samples_give_a_point_interval() {
        assert_eq!(bootstrap_ci(&[2.5; 20], 500, 3).unwrap(), (2.5, 2.5));
        assert!(bootstrap_ci(&[1.0], 500, 3).is_err());
    }

    /// Sequential re-implementation used as an oracle.
    fn naive_bootstrap(samples: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut means = Vec::new();
        for b in 0..resamples {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut total = 0.0;
            for _ in 0..s.len() {
                total += s[rng.random_range(0..s.len())];
            }
            means.push(total / s.len() as f64);
        }
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pick = |q: f64| {
            let h = q * (means.len() - 1) as f64;
            let (i, f) = (h as usize, h.fract());
            if i + 1 < means.len() {
                means[i] * (1.0 - f) + means[i + 1] * f
            } else {
                means[i]
            }
        };
        (pick(0.025), pick(0.975))
    }

    #[test]
    fn balanced_binary_interval_matches_oracle() {
        let samples: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
        let (lo, hi) = bootstrap_ci(&samples, 10_000, 11).unwrap();
        assert!(lo > 0.45 && hi < 0.55, "({lo}, {hi})");
        let (olo, ohi) = naive_bootstrap(&samples, 10_000, 11);
        assert!((lo - olo).abs() < 1e-12 && (hi - ohi).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_ignores_input_order() {
        let a = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let mut b = a;
        b.reverse();
        assert_eq!(bootstrap_ci(&a, 2000, 5).unwrap(), bootstrap_ci(&b, 2000, 5).unwrap());
    }

    fn naive_counts(pred: &[u8], gt: &[u8], c: u8) -> (u64, u64, u64) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..pred.len() {
            match (pred[i] == c, gt[i] == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        (tp, fp, fn_)
    }

    proptest! {
        #[test]
        fn confusion_matches_double_loop(labels in proptest::collection::vec((0u8..5, 0u8..5), 1..100)) {
            let (pred, gt): (Vec<u8>, Vec<u8>) = labels.into_iter().unzip();
            let c = confusion(&pred, &gt).unwrap();
            for class in 0..5 {
                let k = c.get(class);
                prop_assert_eq!((k.tp, k.fp, k.fn_), naive_counts(&pred, &gt, class));
            }
        }

        #[test]
        fn dsc_is_bounded_and_symmetric(labels in proptest::collection::vec((0u8..4, 0u8..4), 1..60)) {
            let (pred, gt): (Vec<u8>, Vec<u8>) = labels.into_iter().unzip();
            let a = confusion(&pred, &gt).unwrap();
            let b = confusion(&gt, &pred).unwrap();
            for class in present_classes(&pred, &gt) {
                let d = dsc(&a, class).unwrap();
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert_eq!(Some(d), dsc(&b, class));
                let k = a.get(class);
                prop_assert_eq!(d == 1.0, k.fp == 0 && k.fn_ == 0);
            }
        }
    }
}
