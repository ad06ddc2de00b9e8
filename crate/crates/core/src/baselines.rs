//! Non-learned motion estimators.
//!
//! * Linear motion: the mean inter-frame motion of a training set, applied to
//!   every interval of every test scan.
//! * Speckle decorrelation: elevational distance from the mean patch-wise
//!   correlation of neighbouring frames through a calibrated Gaussian curve
//!   `rho(dz) = exp(-dz^2 / (2 w^2))`, in-plane shift from the whole-frame
//!   cross-correlation peak, rotations fixed at zero.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom::{relative_pose, DofVector, FrameGeometry};
use crate::io::{Frame, ScanSequence};
use crate::reconstruct::MotionEstimator;
use crate::stats::pearson;

/// Correlations at or below this are dropped from calibration and clamp the
/// estimate.
pub const DEFAULT_RHO_FLOOR: f64 = 0.1;
pub const DEFAULT_PATCH: usize = 16;
/// Calibration pairs frames `k = 1..=MAX_CALIBRATION_GAP` apart.
pub const MAX_CALIBRATION_GAP: usize = 5;
pub const MIN_CALIBRATION_SAMPLES: usize = 10;

/// Mean inter-frame motion over every interval of every training scan.
pub fn fit_linear_motion(training: &[ScanSequence]) -> Result<DofVector> {
    if training.is_empty() {
        return Err(invalid("linear motion needs at least one training scan"));
    }
    let mut sum = DofVector::ZERO;
    let mut count = 0usize;
    for scan in training {
        scan.require_poses()?;
        for d in scan.relative_dofs().expect("poses checked")? {
            sum = sum + d;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Fixed-motion estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearMotion {
    pub motion: DofVector,
}

impl MotionEstimator for LinearMotion {
    fn window_len(&self) -> usize {
        2
    }

    fn estimate(&self, _scan: &ScanSequence, _start: usize) -> Result<DofVector> {
        Ok(self.motion)
    }
}

/// Patch-wise normalised cross-correlation of two frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    /// Row-major, one value per patch, each in `[-1, 1]`.
    pub values: Vec<f64>,
}

impl CorrelationMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Pearson correlation of co-located, non-overlapping `patch x patch` tiles.
/// Tiles that are constant in either frame score 0.
pub fn speckle_correlation_map(a: &Frame, b: &Frame, patch: usize) -> Result<CorrelationMap> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(invalid(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if patch < 4 || patch > a.width().min(a.height()) {
        return Err(invalid(format!(
            "patch size {patch} must lie in [4, {}]",
            a.width().min(a.height())
        )));
    }
    let rows = a.height() / patch;
    let cols = a.width() / patch;
    let mut xa = Vec::with_capacity(patch * patch);
    let mut xb = Vec::with_capacity(patch * patch);
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            xa.clear();
            xb.clear();
            for v in r * patch..(r + 1) * patch {
                for u in c * patch..(c + 1) * patch {
                    xa.push(a.get(u, v) as f64);
                    xb.push(b.get(u, v) as f64);
                }
            }
            values.push(pearson(&xa, &xb, 1e-12));
        }
    }
    Ok(CorrelationMap {
        rows,
        cols,
        patch,
        values,
    })
}

/// Gaussian decorrelation curve `rho(dz) = exp(-dz^2 / (2 w^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecorrCurve {
    /// Decorrelation width, mm.
    pub w: f64,
    pub rho_floor: f64,
    /// Upper clamp on the estimated elevational distance, mm.
    pub max_dz: f64,
}

impl DecorrCurve {
    /// Curve whose clamp sits where the model reaches `rho_floor`.
    pub fn new(w: f64, rho_floor: f64) -> Result<Self> {
        let c = Self {
            w,
            rho_floor,
            max_dz: w * (-2.0 * rho_floor.ln()).sqrt(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.w.is_finite()) {
            return Err(invalid(format!("decorrelation width must be positive, got {}", self.w)));
        }
        if !(self.rho_floor > 0.0 && self.rho_floor < 1.0) {
            return Err(invalid("rho_floor must lie in (0, 1)"));
        }
        if !(self.max_dz > 0.0) {
            return Err(invalid("max_dz must be positive"));
        }
        Ok(())
    }

    pub fn correlation_at(&self, dz: f64) -> f64 {
        (-dz * dz / (2.0 * self.w * self.w)).exp()
    }

    /// Inverse of the curve, clamped to `[0, max_dz]`.
    pub fn distance_for(&self, rho: f64) -> f64 {
        let rho = rho.max(self.rho_floor).min(1.0);
        (self.w * (-2.0 * rho.ln()).sqrt()).min(self.max_dz)
    }
}

/// Least-squares width fit of `ln rho = -dz^2 / (2 w^2)` over `(dz, rho)`
/// samples with `rho > rho_floor`.
pub fn fit_decorrelation_width(samples: &[(f64, f64)], rho_floor: f64) -> Result<f64> {
    let usable: Vec<(f64, f64)> = samples
        .iter()
        .copied()
        .filter(|&(dz, rho)| rho > rho_floor && rho < 1.0 && dz.is_finite())
        .collect();
    if usable.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} usable calibration samples above rho = {rho_floor}, need {MIN_CALIBRATION_SAMPLES}",
            usable.len()
        )));
    }
    // minimise sum (ln rho + a dz^2)^2 over a = 1 / (2 w^2)
    let (mut num, mut den) = (0.0, 0.0);
    for (dz, rho) in &usable {
        let q = dz * dz;
        num -= q * rho.ln();
        den += q * q;
    }
    if !(den > 0.0) || !(num > 0.0) {
        return Err(Error::InsufficientData(
            "calibration samples carry no decorrelation".into(),
        ));
    }
    Ok((den / (2.0 * num)).sqrt())
}

/// Collects `(|tz|, mean patch correlation)` from frame pairs `k = 1..=5`
/// apart and fits the curve width.
pub fn calibration_samples(training: &[ScanSequence], patch: usize) -> Result<Vec<(f64, f64)>> {
    let mut samples = Vec::new();
    for scan in training {
        let poses = scan.require_poses()?;
        let frames = scan.frames();
        for k in 1..=MAX_CALIBRATION_GAP {
            for i in 0..scan.len().saturating_sub(k) {
                let rel = relative_pose(&poses[i], &poses[i + k]);
                let dz = rel.translation().z.abs();
                let rho = speckle_correlation_map(&frames[i], &frames[i + k], patch)?.mean();
                samples.push((dz, rho));
            }
        }
    }
    Ok(samples)
}

pub fn calibrate_decorrelation(training: &[ScanSequence], patch: usize) -> Result<DecorrCurve> {
    calibrate_decorrelation_with_floor(training, patch, DEFAULT_RHO_FLOOR)
}

pub fn calibrate_decorrelation_with_floor(
    training: &[ScanSequence],
    patch: usize,
    rho_floor: f64,
) -> Result<DecorrCurve> {
    if training.is_empty() {
        return Err(invalid("decorrelation calibration needs training scans"));
    }
    let samples = calibration_samples(training, patch)?;
    let w = fit_decorrelation_width(&samples, rho_floor)?;
    DecorrCurve::new(w, rho_floor)
}

/// Settings of the decorrelation estimator that are not fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecorrelationOptions {
    pub patch: usize,
    /// Sign given to the (unsigned) elevational estimate: `+1` or `-1`.
    pub sweep_direction: f64,
    /// In-plane search radius in pixels; `None` uses a quarter of the frame.
    pub max_shift: Option<usize>,
}

impl Default for DecorrelationOptions {
    fn default() -> Self {
        Self {
            patch: DEFAULT_PATCH,
            sweep_direction: 1.0,
            max_shift: None,
        }
    }
}

/// Integer shift `(sx, sy)` maximising the correlation of `b(u, v)` with
/// `a(u + sx, v + sy)` over their overlap. Ties go to the smaller shift.
pub fn in_plane_shift(a: &Frame, b: &Frame, max_shift: usize) -> (isize, isize) {
    let (w, h) = (a.width() as isize, a.height() as isize);
    let m = max_shift.min((a.width().min(a.height()) - 1) / 2) as isize;
    let mut shifts: Vec<(isize, isize)> = (-m..=m)
        .flat_map(|sy| (-m..=m).map(move |sx| (sx, sy)))
        .collect();
    shifts.sort_by_key(|&(sx, sy)| (sx.abs() + sy.abs(), sy, sx));
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for (sx, sy) in shifts {
        xa.clear();
        xb.clear();
        for v in 0.max(-sy)..h.min(h - sy) {
            for u in 0.max(-sx)..w.min(w - sx) {
                xb.push(b.get(u as usize, v as usize) as f64);
                xa.push(a.get((u + sx) as usize, (v + sy) as usize) as f64);
            }
        }
        let score = pearson(&xa, &xb, 1e-12);
        if score > best_score {
            best_score = score;
            best = (sx, sy);
        }
    }
    best
}

/// Decorrelation estimate of the motion carrying frame `a` onto frame `b`.
pub fn estimate_decorrelation(
    a: &Frame,
    b: &Frame,
    curve: &DecorrCurve,
    g: &FrameGeometry,
    opts: &DecorrelationOptions,
) -> Result<DofVector> {
    let rho = speckle_correlation_map(a, b, opts.patch)?.mean();
    let tz = curve.distance_for(rho) * opts.sweep_direction.signum();
    let max_shift = opts.max_shift.unwrap_or(a.width().min(a.height()) / 4);
    let (sx, sy) = in_plane_shift(a, b, max_shift);
    Ok(DofVector::translation(
        sx as f64 * g.spacing_x,
        sy as f64 * g.spacing_y,
        tz,
    ))
}

/// Calibrated decorrelation estimator over frame pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decorrelation {
    pub curve: DecorrCurve,
    pub options: DecorrelationOptions,
}

impl MotionEstimator for Decorrelation {
    fn window_len(&self) -> usize {
        2
    }

    fn estimate(&self, scan: &ScanSequence, start: usize) -> Result<DofVector> {
        let f = scan.frames();
        estimate_decorrelation(&f[start], &f[start + 1], &self.curve, &scan.geometry, &self.options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{accumulate_trajectory, Pose};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_frame(w: usize, h: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
    }

    fn constant_scan(step: DofVector, n: usize) -> ScanSequence {
        let g = FrameGeometry::new(8, 8, 0.5, 0.5).unwrap();
        let poses = accumulate_trajectory(&Pose::identity(), &vec![step; n - 1]).unwrap();
        ScanSequence::new("c", g, vec![Frame::zeros(8, 8); n], Some(poses)).unwrap()
    }

    #[test]
    fn linear_motion_of_constant_scan() {
        let step = DofVector::translation(0.0, 0.0, 1.0);
        let m = fit_linear_motion(&[constant_scan(step, 9)]).unwrap();
        assert!(m.max_abs_diff(&step) < 1e-12);
    }

    #[test]
    fn linear_motion_averages_scans() {
        let a = DofVector::new(0.0, 0.0, 1.0, 0.0, 0.5, 0.0);
        let b = DofVector::new(0.2, 0.0, 0.4, 0.0, -0.5, 1.0);
        let m = fit_linear_motion(&[constant_scan(a, 6), constant_scan(b, 6)]).unwrap();
        assert!(m.max_abs_diff(&((a + b) / 2.0)) < 1e-9);
        assert!(fit_linear_motion(&[]).is_err());
    }

    #[test]
    fn linear_motion_matches_flat_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = FrameGeometry::new(4, 4, 1.0, 1.0).unwrap();
        let mut scans = Vec::new();
        let mut all = Vec::new();
        for s in 0..4 {
            let n = 3 + s * 2;
            let rel: Vec<DofVector> = (0..n - 1)
                .map(|_| DofVector::from_array(std::array::from_fn(|_| rng.random_range(-2.0..2.0))))
                .collect();
            let poses = accumulate_trajectory(&Pose::identity(), &rel).unwrap();
            scans.push(ScanSequence::new("s", g, vec![Frame::zeros(4, 4); n], Some(poses)).unwrap());
        }
        for s in &scans {
            all.extend(s.relative_dofs().unwrap().unwrap());
        }
        let m = fit_linear_motion(&scans).unwrap();
        for k in 0..6 {
            let oracle = all.iter().map(|d| d.to_array()[k]).sum::<f64>() / all.len() as f64;
            assert!((m.to_array()[k] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_map_identity_and_inverse() {
        let a = noise_frame(32, 24, 1);
        let m = speckle_correlation_map(&a, &a, 8).unwrap();
        assert_eq!((m.rows, m.cols), (3, 4));
        assert!(m.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let inv = Frame::new(32, 24, a.pixels().iter().map(|p| 1.0 - p).collect()).unwrap();
        let m = speckle_correlation_map(&a, &inv, 8).unwrap();
        assert!(m.values.iter().all(|v| (v + 1.0).abs() < 1e-6));
    }

    #[test]
    fn correlation_map_constant_patch_is_zero() {
        let a = Frame::zeros(8, 8);
        let b = noise_frame(8, 8, 3);
        let m = speckle_correlation_map(&a, &b, 4).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correlation_map_argument_errors() {
        let a = noise_frame(8, 8, 1);
        assert!(speckle_correlation_map(&a, &noise_frame(8, 6, 1), 4).is_err());
        assert!(speckle_correlation_map(&a, &a, 3).is_err());
        assert!(speckle_correlation_map(&a, &a, 9).is_err());
    }

    #[test]
    fn fit_recovers_exact_width() {
        let curve = DecorrCurve::new(1.5, 0.1).unwrap();
        let samples: Vec<(f64, f64)> = (1..=30)
            .map(|i| {
                let dz = i as f64 * 0.1;
                (dz, curve.correlation_at(dz))
            })
            .collect();
        let w = fit_decorrelation_width(&samples, 0.1).unwrap();
        assert!((w - 1.5).abs() < 1e-6, "{w}");
    }

    #[test]
    fn fit_without_usable_samples_fails() {
        let samples: Vec<(f64, f64)> = (1..50).map(|i| (i as f64, 0.05)).collect();
        assert!(matches!(
            fit_decorrelation_width(&samples, 0.1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn identical_frames_give_zero_motion() {
        let a = noise_frame(32, 32, 5);
        let curve = DecorrCurve::new(0.8, 0.1).unwrap();
        let g = FrameGeometry::new(32, 32, 0.5, 0.5).unwrap();
        let opts = DecorrelationOptions {
            patch: 8,
            ..Default::default()
        };
        let d = estimate_decorrelation(&a, &a, &curve, &g, &opts).unwrap();
        assert_eq!(d, DofVector::ZERO);
    }

    #[test]
    fn three_pixel_lateral_shift() {
        // The plane moved +3 px along x: b(u, v) = a(u + 3, v).
        let a = noise_frame(40, 40, 6);
        let fresh = noise_frame(40, 40, 7);
        let b = Frame::from_fn(40, 40, |u, v| {
            if u + 3 < 40 {
                a.get(u + 3, v) as f64
            } else {
                fresh.get(u, v) as f64
            }
        });
        let curve = DecorrCurve::new(0.8, 0.1).unwrap();
        let g = FrameGeometry::new(40, 40, 0.5, 0.5).unwrap();
        let d = estimate_decorrelation(&a, &b, &curve, &g, &DecorrelationOptions::default()).unwrap();
        assert_eq!((d.tx, d.ty), (1.5, 0.0));
        assert_eq!((d.ax, d.ay, d.az), (0.0, 0.0, 0.0));
    }

    #[test]
    fn sweep_direction_sets_sign() {
        let a = noise_frame(16, 16, 8);
        let b = noise_frame(16, 16, 9);
        let curve = DecorrCurve::new(0.8, 0.1).unwrap();
        let g = FrameGeometry::new(16, 16, 0.5, 0.5).unwrap();
        let up = DecorrelationOptions { patch: 8, ..Default::default() };
        let down = DecorrelationOptions { sweep_direction: -1.0, ..up };
        let tz_up = estimate_decorrelation(&a, &b, &curve, &g, &up).unwrap().tz;
        let tz_down = estimate_decorrelation(&a, &b, &curve, &g, &down).unwrap().tz;
        assert!(tz_up > 0.0);
        assert_eq!(tz_up, -tz_down);
    }

    proptest! {
        #[test]
        fn prop_map_is_symmetric(seed_a in 0u64..1000, seed_b in 0u64..1000, patch in 4usize..12) {
            let a = noise_frame(24, 20, seed_a);
            let b = noise_frame(24, 20, seed_b);
            let ab = speckle_correlation_map(&a, &b, patch).unwrap();
            let ba = speckle_correlation_map(&b, &a, patch).unwrap();
            prop_assert_eq!(&ab.values, &ba.values);
            prop_assert!(ab.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn prop_distance_is_bounded_and_monotone(
            w in 0.2f64..3.0, floor in 0.01f64..0.5, r1 in -1.0f64..1.0, r2 in -1.0f64..1.0,
        ) {
            let c = DecorrCurve::new(w, floor).unwrap();
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let (d_lo, d_hi) = (c.distance_for(lo), c.distance_for(hi));
            prop_assert!(d_lo >= 0.0 && d_lo <= c.max_dz);
            prop_assert!(d_hi >= 0.0 && d_hi <= c.max_dz);
            prop_assert!(d_hi <= d_lo);
        }

        #[test]
        fn prop_fit_is_exact_on_model_samples(w in 0.3f64..4.0) {
            let c = DecorrCurve::new(w, 0.1).unwrap();
            let samples: Vec<(f64, f64)> = (1..40)
                .map(|i| i as f64 * w / 15.0)
                .map(|dz| (dz, c.correlation_at(dz)))
                .collect();
            prop_assert!((fit_decorrelation_width(&samples, 0.1).unwrap() - w).abs() < 1e-6);
        }
    }
}
