//! Trajectory error metrics and per-dataset evaluation reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom::{frame_center, frame_corners, DofVector, FrameGeometry, Pose};
use crate::io::ScanSequence;
use crate::reconstruct::{reconstruct_trajectory, sliding_window_predict, MotionEstimator};
use crate::stats;

/// Correlations of series whose standard deviation is below this are 0.
pub const SIGMA_FLOOR: f64 = 1e-8;

const DOF_NAMES: [&str; 6] = ["tx", "ty", "tz", "ax", "ay", "az"];

fn check_lengths(gt: usize, est: usize, min: usize) -> Result<()> {
    if gt != est {
        return Err(invalid(format!(
            "{gt} ground-truth entries but {est} estimates"
        )));
    }
    if gt < min {
        return Err(invalid(format!("need at least {min} entries, got {gt}")));
    }
    Ok(())
}

/// Mean distance between corresponding frame corners over every frame.
pub fn distance_error(gt: &[Pose], est: &[Pose], g: &FrameGeometry) -> Result<f64> {
    check_lengths(gt.len(), est.len(), 2)?;
    let total: f64 = gt
        .iter()
        .zip(est)
        .map(|(a, b)| {
            frame_corners(a, g)
                .iter()
                .zip(frame_corners(b, g).iter())
                .map(|(p, q)| (p - q).norm())
                .sum::<f64>()
        })
        .sum();
    Ok(total / (4 * gt.len()) as f64)
}

/// Distance between the frame centres under the last poses.
pub fn final_drift(gt: &[Pose], est: &[Pose], g: &FrameGeometry) -> Result<f64> {
    check_lengths(gt.len(), est.len(), 1)?;
    let (a, b) = (gt.last().expect("non-empty"), est.last().expect("non-empty"));
    Ok((frame_center(a, g) - frame_center(b, g)).norm())
}

/// Per-DOF Pearson correlation between predicted and true motion series.
pub fn dof_correlation(pred: &[DofVector], gt: &[DofVector]) -> Result<[f64; 6]> {
    check_lengths(gt.len(), pred.len(), 2)?;
    let col = |v: &[DofVector], d: usize| -> Vec<f64> { v.iter().map(|x| x.to_array()[d]).collect() };
    Ok(std::array::from_fn(|d| {
        stats::pearson(&col(pred, d), &col(gt, d), SIGMA_FLOOR)
    }))
}

/// Normalised cross-correlation of two equal-length intensity samples.
pub fn normalized_cross_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a.len(), b.len(), 2)?;
    Ok(stats::pearson(a, b, SIGMA_FLOOR))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub average: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("cannot aggregate an empty list"));
        }
        Ok(Self {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            median: stats::median(values),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            average: stats::mean(values),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn of(values: &[f64]) -> Self {
        Self {
            mean: stats::mean(values),
            sd: stats::sample_sd(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub frames: usize,
    pub distance_error: f64,
    pub final_drift: f64,
    pub correlation: [f64; 6],
}

impl CaseResult {
    /// Mean of the six per-DOF correlations.
    pub fn mean_correlation(&self) -> f64 {
        stats::mean(&self.correlation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub window: usize,
    pub cases: Vec<CaseResult>,
    pub distance_error: Aggregate,
    pub final_drift: Aggregate,
    /// Mean and sample sd over cases, per DOF.
    pub correlation: [MeanSd; 6],
    /// Mean and sample sd over cases of each case's six-DOF mean correlation.
    pub correlation_overall: MeanSd,
}

impl EvalReport {
    pub fn from_cases(method: impl Into<String>, window: usize, cases: Vec<CaseResult>) -> Result<Self> {
        if cases.is_empty() {
            return Err(invalid("no cases to report"));
        }
        let de: Vec<f64> = cases.iter().map(|c| c.distance_error).collect();
        let fd: Vec<f64> = cases.iter().map(|c| c.final_drift).collect();
        let correlation = std::array::from_fn(|d| {
            MeanSd::of(&cases.iter().map(|c| c.correlation[d]).collect::<Vec<_>>())
        });
        let overall: Vec<f64> = cases.iter().map(CaseResult::mean_correlation).collect();
        Ok(Self {
            method: method.into(),
            window,
            distance_error: Aggregate::of(&de)?,
            final_drift: Aggregate::of(&fd)?,
            correlation,
            correlation_overall: MeanSd::of(&overall),
            cases,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table: aggregate errors, then correlation statistics.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "method: {}  window: {}  cases: {}",
            self.method,
            self.window,
            self.cases.len()
        );
        let _ = writeln!(s, "{:<20}{:>10}{:>10}{:>10}{:>10}", "", "Min", "Median", "Max", "Average");
        for (name, a) in [
            ("Distance Error (mm)", &self.distance_error),
            ("Final Drift (mm)", &self.final_drift),
        ] {
            let _ = writeln!(
                s,
                "{name:<20}{:>10.3}{:>10.3}{:>10.3}{:>10.3}",
                a.min, a.median, a.max, a.average
            );
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<20}", "Correlation");
        for n in DOF_NAMES {
            let _ = write!(s, "{n:>8}");
        }
        let _ = writeln!(s, "{:>8}", "all");
        for (label, pick) in [("mean", 0), ("sd", 1)] {
            let _ = write!(s, "{label:<20}");
            for c in &self.correlation {
                let _ = write!(s, "{:>8.3}", if pick == 0 { c.mean } else { c.sd });
            }
            let o = &self.correlation_overall;
            let _ = writeln!(s, "{:>8.3}", if pick == 0 { o.mean } else { o.sd });
        }
        s
    }
}

/// Scores one scan's per-interval motion estimates against its ground truth.
/// The estimated trajectory starts at the true first pose.
pub fn evaluate_case(scan: &ScanSequence, relatives: &[DofVector]) -> Result<CaseResult> {
    let gt = scan.require_poses()?;
    if relatives.len() + 1 != gt.len() {
        return Err(invalid(format!(
            "scan '{}': {} motion estimates for {} frames",
            scan.id,
            relatives.len(),
            gt.len()
        )));
    }
    let est = reconstruct_trajectory(relatives, &gt[0])?;
    let truth = crate::geom::relative_dofs(gt)?;
    Ok(CaseResult {
        id: scan.id.clone(),
        frames: gt.len(),
        distance_error: distance_error(gt, &est, &scan.geometry)?,
        final_drift: final_drift(gt, &est, &scan.geometry)?,
        correlation: dof_correlation(relatives, &truth)?,
    })
}

/// Sliding-window inference, trajectory reconstruction and scoring for every scan.
pub fn evaluate_dataset<E: MotionEstimator + ?Sized>(
    method: &str,
    estimator: &E,
    scans: &[ScanSequence],
) -> Result<EvalReport> {
    if scans.is_empty() {
        return Err(invalid("no scans to evaluate"));
    }
    let cases = scans
        .par_iter()
        .map(|scan| {
            scan.require_poses()?;
            let rel = sliding_window_predict(estimator, scan)?;
            evaluate_case(scan, &rel)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_cases(method, estimator.window_len(), cases)
}

/// Scores precomputed per-interval predictions, one list per scan.
pub fn evaluate_predictions(
    method: &str,
    window: usize,
    scans: &[ScanSequence],
    predictions: &[Vec<DofVector>],
) -> Result<EvalReport> {
    if scans.is_empty() {
        return Err(invalid("no scans to evaluate"));
    }
    if scans.len() != predictions.len() {
        return Err(invalid(format!(
            "{} scans but {} prediction lists",
            scans.len(),
            predictions.len()
        )));
    }
    let cases = scans
        .par_iter()
        .zip(predictions.par_iter())
        .map(|(s, p)| evaluate_case(s, p))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_cases(method, window, cases)
}
