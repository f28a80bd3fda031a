//! Mask and pose evaluation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::hand_model::HandPose;
use crate::mask::HandMask;
use crate::scalar::Scalar;

pub const DEFAULT_CM_PER_UNIT: f64 = 20.0;

/// Two-class confusion counts; `counts[i][j]` is pixels of class `i`
/// predicted as `j`, with class 1 = hand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaskEval {
    pub counts: [[u64; 2]; 2],
}

impl MaskEval {
    pub fn new(pred: &HandMask, truth: &HandMask) -> Result<Self> {
        if pred.side() != truth.side() {
            return Err(Error::Shape(format!(
                "mask sides differ: {} vs {}",
                pred.side(),
                truth.side()
            )));
        }
        let mut counts = [[0u64; 2]; 2];
        for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
            counts[t as usize][p as usize] += 1;
        }
        Ok(Self { counts })
    }

    /// Thresholds a probability map at 0.5 first.
    pub fn from_probabilities<T: Scalar>(probs: &[T], truth: &HandMask) -> Result<Self> {
        Self::new(&HandMask::from_probabilities(truth.side(), probs)?, truth)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &MaskEval) {
        for i in 0..2 {
            for j in 0..2 {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }
}

/// A metric value plus whether an empty-set convention was applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flagged {
    pub value: f64,
    pub flagged: bool,
}

/// Mean of per-class pixel accuracy; classes with no pixels are skipped and flagged.
pub fn mean_pixel_accuracy(eval: &MaskEval) -> Flagged {
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..2 {
        let row: u64 = eval.counts[i].iter().sum();
        if row > 0 {
            sum += eval.counts[i][i] as f64 / row as f64;
            k += 1;
        }
    }
    Flagged {
        value: if k == 0 { 1.0 } else { sum / k as f64 },
        flagged: k < 2,
    }
}

/// Hand-class IoU; 1.0 (flagged) when both masks are empty.
pub fn iou(eval: &MaskEval) -> Flagged {
    let inter = eval.counts[1][1];
    let union = inter + eval.counts[0][1] + eval.counts[1][0];
    if union == 0 {
        Flagged {
            value: 1.0,
            flagged: true,
        }
    } else {
        Flagged {
            value: inter as f64 / union as f64,
            flagged: false,
        }
    }
}

fn joint_errors<'a, T: Scalar>(pred: &'a HandPose<T>, truth: &'a HandPose<T>) -> impl Iterator<Item = T> + 'a {
    pred.joints()
        .iter()
        .zip(truth.joints().iter())
        .map(|(a, b)| geom::dist(*a, *b))
}

/// Mean per-joint Euclidean error.
pub fn mpjpe<T: Scalar>(pred: &HandPose<T>, truth: &HandPose<T>) -> T {
    let n = T::of(pred.joints().len() as f64);
    joint_errors(pred, truth).sum::<T>() / n
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PckConfig {
    /// Threshold in pose units.
    pub threshold: f64,
}

impl Default for PckConfig {
    fn default() -> Self {
        Self::from_cm(2.0, DEFAULT_CM_PER_UNIT).expect("positive")
    }
}

impl PckConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::Argument(format!("PCK threshold {threshold} must be > 0")));
        }
        Ok(Self { threshold })
    }

    pub fn from_cm(cm: f64, cm_per_unit: f64) -> Result<Self> {
        Self::new(cm / cm_per_unit)
    }
}

/// Fraction of joints whose error is at most the threshold.
pub fn pck<T: Scalar>(pred: &HandPose<T>, truth: &HandPose<T>, cfg: &PckConfig) -> f64 {
    let a = T::of(cfg.threshold);
    let hits = joint_errors(pred, truth).filter(|&e| e <= a).count();
    hits as f64 / pred.joints().len() as f64
}

/// Nearest-rank percentile with rank `min(n, floor(p n) + 1)`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("percentile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Argument(format!("percentile {p} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let rank = ((p * n as f64).floor() as usize + 1).min(n);
    Ok(v[rank - 1])
}

/// Per-step Euclidean errors between two tracks.
pub fn track_errors(pred: &[Vec3<f64>], truth: &[Vec3<f64>]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "tracks must be equal and non-empty, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| geom::dist(*a, *b)).collect())
}

/// (50th, 90th) percentile of per-step errors.
pub fn trajectory_error_percentiles(pred: &[Vec3<f64>], truth: &[Vec3<f64>]) -> Result<(f64, f64)> {
    let e = track_errors(pred, truth)?;
    Ok((percentile(&e, 0.5)?, percentile(&e, 0.9)?))
}

/// Dataset-level means of the evaluation metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub samples: usize,
    /// Mask metrics are absent for single-task models.
    pub mpa: Option<f64>,
    pub iou: Option<f64>,
    /// Samples whose mask metric used an empty-set convention.
    pub mask_flagged: usize,
    pub mpjpe: f64,
    pub mpjpe_cm: f64,
    pub pck: f64,
}

impl MetricReport {
    /// One `name=value count=n` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let (Some(mpa), Some(iou)) = (self.mpa, self.iou) {
            let _ = writeln!(out, "metric=mpa value={mpa:.6} count={}", self.samples);
            let _ = writeln!(out, "metric=iou value={iou:.6} count={}", self.samples);
        }
        let _ = writeln!(out, "metric=mpjpe value={:.6} count={}", self.mpjpe, self.samples);
        let _ = writeln!(out, "metric=mpjpe_cm value={:.6} count={}", self.mpjpe_cm, self.samples);
        let _ = writeln!(out, "metric=pck value={:.6} count={}", self.pck, self.samples);
        out
    }
}
