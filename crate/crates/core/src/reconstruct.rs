//! Sliding-window inference over whole scans and volume compounding.

use nalgebra::Point3;
use rayon::prelude::*;

use crate::baselines::{Decorrelation, LinearMotion};
use crate::error::{invalid, Result};
use crate::geom::{accumulate_trajectory, frame_corners, DofVector, FrameGeometry, Pose};
use crate::io::{Frame, ScanSequence};
use crate::nn::Model;
use crate::phantom::Volume;

/// Anything that maps a window of `window_len()` consecutive frames to the
/// mean inter-frame motion across it.
pub trait MotionEstimator: Sync {
    fn window_len(&self) -> usize;

    /// Estimate for frames `start..start + window_len()` of `scan`.
    fn estimate(&self, scan: &ScanSequence, start: usize) -> Result<DofVector>;
}

/// The compared estimation methods behind one interface.
#[derive(Debug, Clone)]
pub enum Estimator {
    Linear(LinearMotion),
    Decorrelation(Decorrelation),
    Neural(Box<Model>),
}

impl MotionEstimator for Estimator {
    fn window_len(&self) -> usize {
        match self {
            Estimator::Linear(e) => e.window_len(),
            Estimator::Decorrelation(e) => e.window_len(),
            Estimator::Neural(m) => m.window_len(),
        }
    }

    fn estimate(&self, scan: &ScanSequence, start: usize) -> Result<DofVector> {
        match self {
            Estimator::Linear(e) => e.estimate(scan, start),
            Estimator::Decorrelation(e) => e.estimate(scan, start),
            Estimator::Neural(m) => m.estimate(scan, start),
        }
    }
}

impl MotionEstimator for Model {
    fn window_len(&self) -> usize {
        Model::window_len(self)
    }

    fn estimate(&self, scan: &ScanSequence, start: usize) -> Result<DofVector> {
        Model::estimate(self, scan, start)
    }
}

impl<T: MotionEstimator + ?Sized> MotionEstimator for &T {
    fn window_len(&self) -> usize {
        (**self).window_len()
    }

    fn estimate(&self, scan: &ScanSequence, start: usize) -> Result<DofVector> {
        (**self).estimate(scan, start)
    }
}

/// Per-interval motion for a whole scan (length `F - 1`), every window
/// position contributing its estimate to each of the `N - 1` intervals it
/// spans. Intervals near the ends average over fewer windows.
pub fn sliding_window_predict<E: MotionEstimator + ?Sized>(
    est: &E,
    scan: &ScanSequence,
) -> Result<Vec<DofVector>> {
    sliding_window_predict_strided(est, scan, 1)
}

/// As [`sliding_window_predict`] with windows starting every `stride` frames
/// (the last window is always anchored at `F - N`). `stride` may not exceed
/// `N - 1`, or some intervals would receive no estimate.
pub fn sliding_window_predict_strided<E: MotionEstimator + ?Sized>(
    est: &E,
    scan: &ScanSequence,
    stride: usize,
) -> Result<Vec<DofVector>> {
    let n = est.window_len();
    let f = scan.len();
    if n < 2 {
        return Err(invalid("estimator window must span at least 2 frames"));
    }
    if f < n {
        return Err(invalid(format!(
            "scan '{}' has {f} frames, fewer than the window length {n}",
            scan.id
        )));
    }
    if stride == 0 || stride > n - 1 {
        return Err(invalid(format!(
            "stride {stride} must lie in [1, {}] for windows of {n} frames",
            n - 1
        )));
    }
    let mut starts: Vec<usize> = (0..=f - n).step_by(stride).collect();
    if *starts.last().expect("at least one window") != f - n {
        starts.push(f - n);
    }
    let preds = starts
        .par_iter()
        .map(|&s| est.estimate(scan, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(overlap_average(&starts, &preds, n, f - 1))
}

/// Averages window estimates over the intervals each window covers.
pub fn overlap_average(
    starts: &[usize],
    preds: &[DofVector],
    n: usize,
    intervals: usize,
) -> Vec<DofVector> {
    let mut sum = vec![DofVector::ZERO; intervals];
    let mut count = vec![0usize; intervals];
    for (&s, p) in starts.iter().zip(preds) {
        for i in s..s + n - 1 {
            sum[i] = sum[i] + *p;
            count[i] += 1;
        }
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, c)| if c == 0 { s } else { s / c as f64 })
        .collect()
}

/// Absolute poses from per-interval motions, anchored at `start`.
pub fn reconstruct_trajectory(relatives: &[DofVector], start: &Pose) -> Result<Vec<Pose>> {
    accumulate_trajectory(start, relatives)
}

/// Per-voxel provenance in a compounded volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    Empty,
    /// At least one pixel landed in the voxel.
    Hit,
    /// Filled from face neighbours.
    Filled,
}

#[derive(Debug, Clone)]
pub struct Compounded {
    pub volume: Volume,
    pub coverage: Vec<Coverage>,
}

/// Neighbour-mean passes used to close gaps between frame planes.
pub const HOLE_FILL_PASSES: usize = 2;

/// Pixel-nearest-neighbour compounding; see [`compound_with_coverage`].
pub fn compound_volume(
    frames: &[Frame],
    poses: &[Pose],
    g: &FrameGeometry,
    out_spacing: f64,
) -> Result<Volume> {
    Ok(compound_with_coverage(frames, poses, g, out_spacing)?.volume)
}

/// Forward-maps every pixel to its nearest voxel and averages the hits.
///
/// The grid is the axis-aligned bounding box of all frame corners padded by 2
/// voxels. Empty voxels then take the mean of their non-empty face
/// neighbours for [`HOLE_FILL_PASSES`] passes; anything left stays 0.
/// Per-voxel contributions are summed in sorted order, so the result does not
/// depend on frame order or thread count.
pub fn compound_with_coverage(
    frames: &[Frame],
    poses: &[Pose],
    g: &FrameGeometry,
    out_spacing: f64,
) -> Result<Compounded> {
    if frames.len() != poses.len() {
        return Err(invalid(format!(
            "{} frames but {} poses",
            frames.len(),
            poses.len()
        )));
    }
    if frames.is_empty() {
        return Err(invalid("nothing to compound"));
    }
    if !(out_spacing > 0.0) {
        return Err(invalid("output spacing must be positive"));
    }
    if let Some(f) = frames.iter().find(|f| f.width() != g.width || f.height() != g.height) {
        return Err(invalid(format!(
            "frame is {}x{}, geometry says {}x{}",
            f.width(),
            f.height(),
            g.width,
            g.height
        )));
    }

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in poses {
        for c in frame_corners(p, g) {
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
    }
    let pad = 2.0 * out_spacing;
    let origin = [lo[0] - pad, lo[1] - pad, lo[2] - pad];
    let extent = |k: usize| ((hi[k] - lo[k]) / out_spacing - 1e-9).ceil().max(0.0) as usize + 5;
    let dims = [extent(2), extent(1), extent(0)];
    let mut volume = Volume::zeros(dims, origin, out_spacing)?;

    let mut hits: Vec<(usize, f32)> = frames
        .par_iter()
        .zip(poses.par_iter())
        .flat_map_iter(|(frame, pose)| {
            let r = pose.rotation();
            let t = pose.translation();
            let vol = &volume;
            (0..g.height).flat_map(move |v| {
                (0..g.width).filter_map(move |u| {
                    let local = g.local_point(u as f64, v as f64);
                    let p = Point3::from(r * local.coords + t);
                    nearest_voxel(vol, &p).map(|idx| (idx, frame.get(u, v)))
                })
            })
        })
        .collect();
    hits.par_sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut coverage = vec![Coverage::Empty; volume.voxels.len()];
    let mut i = 0;
    while i < hits.len() {
        let idx = hits[i].0;
        let mut sum = 0.0f64;
        let mut j = i;
        while j < hits.len() && hits[j].0 == idx {
            sum += hits[j].1 as f64;
            j += 1;
        }
        volume.voxels[idx] = (sum / (j - i) as f64) as f32;
        coverage[idx] = Coverage::Hit;
        i = j;
    }

    fill_holes(&mut volume, &mut coverage, HOLE_FILL_PASSES);
    Ok(Compounded { volume, coverage })
}

fn nearest_voxel(vol: &Volume, p: &Point3<f64>) -> Option<usize> {
    let idx = |k: usize, n: usize| -> Option<usize> {
        let f = ((p[k] - vol.origin[k]) / vol.spacing).round();
        (f >= 0.0 && f < n as f64).then_some(f as usize)
    };
    let x = idx(0, vol.dims[2])?;
    let y = idx(1, vol.dims[1])?;
    let z = idx(2, vol.dims[0])?;
    Some(vol.index(z, y, x))
}

fn fill_holes(vol: &mut Volume, coverage: &mut [Coverage], passes: usize) {
    let [d, h, w] = vol.dims;
    for _ in 0..passes {
        let snapshot = coverage.to_vec();
        let values = vol.voxels.clone();
        let mut changed = false;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let idx = vol.index(z, y, x);
                    if snapshot[idx] != Coverage::Empty {
                        continue;
                    }
                    let mut sum = 0.0f64;
                    let mut n = 0usize;
                    let mut visit = |zz: usize, yy: usize, xx: usize| {
                        let j = (zz * h + yy) * w + xx;
                        if snapshot[j] != Coverage::Empty {
                            sum += values[j] as f64;
                            n += 1;
                        }
                    };
                    if z > 0 {
                        visit(z - 1, y, x);
                    }
                    if z + 1 < d {
                        visit(z + 1, y, x);
                    }
                    if y > 0 {
                        visit(z, y - 1, x);
                    }
                    if y + 1 < h {
                        visit(z, y + 1, x);
                    }
                    if x > 0 {
                        visit(z, y, x - 1);
                    }
                    if x + 1 < w {
                        visit(z, y, x + 1);
                    }
                    if n > 0 {
                        vol.voxels[idx] = (sum / n as f64) as f32;
                        coverage[idx] = Coverage::Filled;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
}
