//! Synthetic speckle phantoms and simulated freehand sweeps.
//!
//! The phantom is Rayleigh-amplitude noise smoothed by a Gaussian of one voxel
//! standard deviation, min-max normalised to `[0, 1]`, with optional ellipsoidal
//! inclusions that shift the local echogenicity. Slicing it along a pose
//! trajectory yields frames whose speckle decorrelates with elevational
//! distance, with exact ground-truth poses attached.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom::{accumulate_trajectory, DofVector, FrameGeometry, Pose};
use crate::io::{Frame, ScanSequence};

/// Minimum phantom extent along each axis, in voxels.
pub const MIN_PHANTOM_DIM: usize = 16;

/// Scalar voxel grid, `[z][y][x]` order, isotropic spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `(depth, height, width)` = voxel counts along `(z, y, x)`.
    pub dims: [usize; 3],
    /// World position (mm) of voxel `(0, 0, 0)`.
    pub origin: [f64; 3],
    pub spacing: f64,
    pub voxels: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct VolumeMeta {
    dims: [usize; 3],
    origin: [f64; 3],
    spacing: f64,
}

pub const VOLUME_FILE: &str = "volume.f32";

impl Volume {
    pub fn zeros(dims: [usize; 3], origin: [f64; 3], spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(invalid("voxel spacing must be positive"));
        }
        if dims.contains(&0) {
            return Err(invalid("volume dimensions must be non-zero"));
        }
        Ok(Self {
            dims,
            origin,
            spacing,
            voxels: vec![0.0; dims[0] * dims[1] * dims[2]],
        })
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    /// World position of voxel `(z, y, x)`.
    pub fn voxel_center(&self, z: usize, y: usize, x: usize) -> Point3<f64> {
        Point3::new(
            self.origin[0] + x as f64 * self.spacing,
            self.origin[1] + y as f64 * self.spacing,
            self.origin[2] + z as f64 * self.spacing,
        )
    }

    /// Trilinear interpolation at world point `p`; 0 outside the grid.
    pub fn sample(&self, p: &Point3<f64>) -> f64 {
        let fx = (p.x - self.origin[0]) / self.spacing;
        let fy = (p.y - self.origin[1]) / self.spacing;
        let fz = (p.z - self.origin[2]) / self.spacing;
        let [d, h, w] = self.dims;
        let inside = |f: f64, n: usize| f >= 0.0 && f <= (n - 1) as f64;
        if !(inside(fx, w) && inside(fy, h) && inside(fz, d)) {
            return 0.0;
        }
        let cell = |f: f64, n: usize| -> (usize, f64) {
            if n == 1 {
                return (0, 0.0);
            }
            let i = (f.floor() as usize).min(n - 2);
            (i, f - i as f64)
        };
        let (x0, tx) = cell(fx, w);
        let (y0, ty) = cell(fy, h);
        let (z0, tz) = cell(fz, d);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let z1 = (z0 + 1).min(d - 1);
        let v = |z, y, x| self.get(z, y, x) as f64;
        let c00 = v(z0, y0, x0) * (1.0 - tx) + v(z0, y0, x1) * tx;
        let c01 = v(z0, y1, x0) * (1.0 - tx) + v(z0, y1, x1) * tx;
        let c10 = v(z1, y0, x0) * (1.0 - tx) + v(z1, y0, x1) * tx;
        let c11 = v(z1, y1, x0) * (1.0 - tx) + v(z1, y1, x1) * tx;
        let c0 = c00 * (1.0 - ty) + c01 * ty;
        let c1 = c10 * (1.0 - ty) + c11 * ty;
        c0 * (1.0 - tz) + c1 * tz
    }

    /// Writes `meta.json` (`{dims, origin, spacing}`) and `volume.f32`
    /// (little-endian `f32`, `[z][y][x]`) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let meta = VolumeMeta {
            dims: self.dims,
            origin: self.origin,
            spacing: self.spacing,
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        let blob: Vec<u8> = self.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(VOLUME_FILE), blob)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::NotFound(meta_path));
        }
        let meta: VolumeMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
        let mut vol = Volume::zeros(meta.dims, meta.origin, meta.spacing)?;
        let blob = fs::read(dir.join(VOLUME_FILE))?;
        if blob.len() != vol.voxels.len() * 4 {
            return Err(Error::Format(format!(
                "{}: {} bytes for {:?} voxels",
                dir.join(VOLUME_FILE).display(),
                blob.len(),
                meta.dims
            )));
        }
        for (v, c) in vol.voxels.iter_mut().zip(blob.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        Ok(vol)
    }
}

/// Phantom generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    /// `(depth, height, width)` in voxels.
    pub dims: [usize; 3],
    /// mm per voxel.
    pub spacing: f64,
    pub n_inclusions: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            dims: [128, 128, 128],
            spacing: 0.5,
            n_inclusions: 6,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution along one axis with edge replication.
fn smooth_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let [d, h, w] = dims;
    let stride = match axis {
        0 => h * w,
        1 => w,
        _ => 1,
    };
    let n = dims[axis] as isize;
    let mut out = vec![0.0; data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                let pos = [z, y, x][axis] as isize;
                let base = idx as isize - pos * stride as isize;
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let q = (pos + k as isize - r).clamp(0, n - 1);
                    acc += kv * data[(base + q * stride as isize) as usize];
                }
                out[idx] = acc;
            }
        }
    }
    out
}

/// Speckle phantom with its world origin at zero.
pub fn generate_phantom(params: &PhantomParams, seed: u64) -> Result<Volume> {
    let dims = params.dims;
    if dims.iter().any(|&d| d < MIN_PHANTOM_DIM) {
        return Err(invalid(format!(
            "phantom dimensions {dims:?} must each be at least {MIN_PHANTOM_DIM}"
        )));
    }
    if !(params.spacing > 0.0) {
        return Err(invalid("phantom spacing must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product::<usize>();
    let mut field: Vec<f64> = (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            a.hypot(b)
        })
        .collect();
    let kernel = gaussian_kernel(1.0);
    for axis in 0..3 {
        field = smooth_axis(&field, dims, axis, &kernel);
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    field.iter_mut().for_each(|v| *v = (*v - lo) / span);

    let [d, h, w] = dims;
    for _ in 0..params.n_inclusions {
        let c = [
            rng.random_range(0.0..d as f64),
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        ];
        let semi = [
            rng.random_range(0.06..0.2) * d as f64,
            rng.random_range(0.06..0.2) * h as f64,
            rng.random_range(0.06..0.2) * w as f64,
        ];
        let offset = rng.random_range(-0.3..=0.3);
        let lo = |i: usize| (c[i] - semi[i]).floor().max(0.0) as usize;
        let hi = |i: usize, n: usize| ((c[i] + semi[i]).ceil() as usize).min(n - 1);
        for z in lo(0)..=hi(0, d) {
            for y in lo(1)..=hi(1, h) {
                for x in lo(2)..=hi(2, w) {
                    let q = ((z as f64 - c[0]) / semi[0]).powi(2)
                        + ((y as f64 - c[1]) / semi[1]).powi(2)
                        + ((x as f64 - c[2]) / semi[2]).powi(2);
                    if q <= 1.0 {
                        field[(z * h + y) * w + x] += offset;
                    }
                }
            }
        }
    }
    Ok(Volume {
        dims,
        origin: [0.0; 3],
        spacing: params.spacing,
        voxels: field.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    /// `base + jitter`
    Constant,
    /// `base + amplitude * sin(2 pi i / period + phase) + jitter`
    Sinusoidal,
    /// Sinusoid plus a second, incommensurate component:
    /// `base + amplitude * (0.6 sin(2 pi i / period + phase) + 0.4 sin(2 pi i * 1.618 / period)) + jitter`
    Composite,
}

/// Per-interval motion model of a simulated sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Mean per-interval motion.
    pub base: DofVector,
    #[serde(default)]
    pub amplitude: DofVector,
    /// Sinusoid period in intervals.
    #[serde(default = "default_period")]
    pub period: f64,
    /// Phase offset of the primary sinusoid, radians.
    #[serde(default)]
    pub phase: f64,
    /// Per-component standard deviation of Gaussian jitter.
    #[serde(default)]
    pub jitter: DofVector,
}

fn default_period() -> f64 {
    20.0
}

impl TrajectorySpec {
    pub fn constant(base: DofVector) -> Self {
        Self {
            kind: TrajectoryKind::Constant,
            base,
            amplitude: DofVector::ZERO,
            period: default_period(),
            phase: 0.0,
            jitter: DofVector::ZERO,
        }
    }

    pub fn sinusoidal(base: DofVector, amplitude: DofVector, period: f64) -> Self {
        Self {
            kind: TrajectoryKind::Sinusoidal,
            amplitude,
            period,
            ..Self::constant(base)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != TrajectoryKind::Constant && !(self.period >= 2.0) {
            return Err(invalid(format!(
                "trajectory period must be at least 2 intervals, got {}",
                self.period
            )));
        }
        if self.jitter.to_array().iter().any(|&j| !(j >= 0.0)) {
            return Err(invalid("trajectory jitter must be non-negative"));
        }
        if !(self.base.is_finite() && self.amplitude.is_finite() && self.phase.is_finite()) {
            return Err(invalid("trajectory parameters must be finite"));
        }
        Ok(())
    }

    fn modulation(&self, i: usize) -> f64 {
        let t = 2.0 * PI * i as f64 / self.period;
        match self.kind {
            TrajectoryKind::Constant => 0.0,
            TrajectoryKind::Sinusoidal => (t + self.phase).sin(),
            TrajectoryKind::Composite => {
                0.6 * (t + self.phase).sin() + 0.4 * (t * 1.618_033_988_75).sin()
            }
        }
    }
}

/// The `n_frames - 1` per-interval motions of a trajectory.
pub fn trajectory_dofs(spec: &TrajectorySpec, n_frames: usize, seed: u64) -> Result<Vec<DofVector>> {
    spec.validate()?;
    if n_frames < 2 {
        return Err(invalid("a trajectory needs at least 2 frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let jitter = spec.jitter.to_array();
    Ok((0..n_frames - 1)
        .map(|i| {
            let noise: [f64; 6] = std::array::from_fn(|k| {
                let z: f64 = rng.sample(StandardNormal);
                z * jitter[k]
            });
            spec.base + spec.amplitude * spec.modulation(i) + DofVector::from_array(noise)
        })
        .collect())
}

/// Absolute poses of a simulated sweep starting at `start`.
pub fn generate_trajectory(
    spec: &TrajectorySpec,
    n_frames: usize,
    start: &Pose,
    seed: u64,
) -> Result<Vec<Pose>> {
    accumulate_trajectory(start, &trajectory_dofs(spec, n_frames, seed)?)
}

/// Samples the phantom on the frame plane placed at `pose`.
pub fn slice_frame(phantom: &Volume, pose: &Pose, g: &FrameGeometry) -> Frame {
    let r = pose.rotation();
    let t = pose.translation();
    Frame::from_fn(g.width, g.height, |u, v| {
        let local = g.local_point(u as f64, v as f64);
        phantom.sample(&Point3::from(r * local.coords + t))
    })
}

/// Geometry and noise of one simulated sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub trajectory: TrajectorySpec,
    pub n_frames: usize,
    pub geometry: FrameGeometry,
    pub start: Pose,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sd: f64,
}

/// Slices `phantom` along the sweep trajectory and adds pixel noise.
pub fn simulate_scan(
    phantom: &Volume,
    sweep: &Sweep,
    seed: u64,
    id: impl Into<String>,
) -> Result<ScanSequence> {
    if !(sweep.noise_sd >= 0.0) {
        return Err(invalid("noise standard deviation must be non-negative"));
    }
    sweep.geometry.validate()?;
    let poses = generate_trajectory(&sweep.trajectory, sweep.n_frames, &sweep.start, seed)?;
    let frames: Vec<Frame> = poses
        .par_iter()
        .enumerate()
        .map(|(k, pose)| {
            let clean = slice_frame(phantom, pose, &sweep.geometry);
            if sweep.noise_sd == 0.0 {
                return clean;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1000 + k as u64);
            let mut it = clean.pixels().iter();
            Frame::from_fn(sweep.geometry.width, sweep.geometry.height, |_, _| {
                let z: f64 = rng.sample(StandardNormal);
                *it.next().expect("pixel count") as f64 + sweep.noise_sd * z
            })
        })
        .collect();
    ScanSequence::new(id, sweep.geometry, frames, Some(poses))
}

/// Per-scan randomisation of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Variation {
    /// Each base component is shifted by a uniform draw in `[-spread, spread]`.
    #[serde(default)]
    pub base_spread: DofVector,
    /// Each scan draws its period uniformly from this range, when set.
    #[serde(default)]
    pub period_range: Option<[f64; 2]>,
    /// Draw a uniform phase in `[0, 2 pi)` per scan.
    #[serde(default)]
    pub random_phase: bool,
}

/// Simulation config document: phantom, trajectory and acquisition settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    #[serde(default)]
    pub phantom: PhantomParams,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub variation: Variation,
    pub n_frames: usize,
    pub geometry: FrameGeometry,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default = "default_scans")]
    pub n_scans: usize,
    /// Distance (mm) from the phantom's z = 0 face to the first frame plane.
    #[serde(default = "default_margin")]
    pub start_margin_mm: f64,
    /// A fresh phantom per scan; otherwise all scans share one.
    #[serde(default = "default_true")]
    pub phantom_per_scan: bool,
}

fn default_scans() -> usize {
    1
}

fn default_margin() -> f64 {
    4.0
}

fn default_true() -> bool {
    true
}

impl SimulationConfig {
    /// Desk-scale defaults: 128^3 phantom at 0.5 mm, 64x64 frames at 0.5 mm.
    pub fn desk_default() -> Self {
        Self {
            phantom: PhantomParams::default(),
            trajectory: TrajectorySpec::sinusoidal(
                DofVector::translation(0.0, 0.0, 0.6),
                DofVector::translation(0.0, 0.0, 0.25),
                20.0,
            ),
            variation: Variation::default(),
            n_frames: 60,
            geometry: FrameGeometry {
                width: 64,
                height: 64,
                spacing_x: 0.5,
                spacing_y: 0.5,
            },
            noise_sd: 0.02,
            n_scans: 1,
            start_margin_mm: default_margin(),
            phantom_per_scan: true,
        }
    }
}

/// Places a phantom so the identity pose sits on its central z axis,
/// `margin` mm above its z = 0 face.
pub fn centered_origin(params: &PhantomParams, margin: f64) -> [f64; 3] {
    let [_, h, w] = params.dims;
    [
        -((w - 1) as f64) * params.spacing / 2.0,
        -((h - 1) as f64) * params.spacing / 2.0,
        -margin,
    ]
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng.random()
}

/// Per-scan trajectory after applying the config's variation.
pub fn scan_trajectory(cfg: &SimulationConfig, seed: u64, index: usize) -> TrajectorySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 7));
    rng.set_stream(index as u64);
    let mut spec = cfg.trajectory.clone();
    let spread = cfg.variation.base_spread.to_array();
    let shift: [f64; 6] = std::array::from_fn(|k| {
        let u: f64 = rng.random_range(-1.0..=1.0);
        u * spread[k]
    });
    spec.base = spec.base + DofVector::from_array(shift);
    if let Some([lo, hi]) = cfg.variation.period_range {
        let u: f64 = rng.random();
        spec.period = lo + u * (hi - lo);
    }
    if cfg.variation.random_phase {
        let u: f64 = rng.random();
        spec.phase = 2.0 * PI * u;
    }
    spec
}

/// Simulates `cfg.n_scans` sweeps named `case_000`, `case_001`, ...
pub fn simulate_dataset(cfg: &SimulationConfig, seed: u64) -> Result<Vec<ScanSequence>> {
    let shared = if cfg.phantom_per_scan {
        None
    } else {
        Some(phantom_for(cfg, seed, 0)?)
    };
    (0..cfg.n_scans)
        .map(|i| {
            let owned;
            let phantom = match &shared {
                Some(p) => p,
                None => {
                    owned = phantom_for(cfg, seed, i)?;
                    &owned
                }
            };
            let sweep = Sweep {
                trajectory: scan_trajectory(cfg, seed, i),
                n_frames: cfg.n_frames,
                geometry: cfg.geometry,
                start: Pose::identity(),
                noise_sd: cfg.noise_sd,
            };
            simulate_scan(phantom, &sweep, mix_seed(seed, 2000 + i as u64), format!("case_{i:03}"))
        })
        .collect()
}

fn phantom_for(cfg: &SimulationConfig, seed: u64, index: usize) -> Result<Volume> {
    let mut v = generate_phantom(&cfg.phantom, mix_seed(seed, 100_000 + index as u64))?;
    v.origin = centered_origin(&cfg.phantom, cfg.start_margin_mm);
    Ok(v)
}

/// Offsets `p` by `d` along the frame normal.
pub fn shift_along_normal(p: &Pose, d: f64) -> Pose {
    let n = p.rotation() * Vector3::z();
    let t = p.translation() + n * d;
    Pose::from_rt(p.rotation(), t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{pose_from_dof, relative_dofs};
    use crate::stats::pearson;

    fn small() -> PhantomParams {
        PhantomParams {
            dims: [32, 32, 32],
            spacing: 0.5,
            n_inclusions: 2,
        }
    }

    fn ncc(a: &Frame, b: &Frame) -> f64 {
        let x: Vec<f64> = a.pixels().iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.pixels().iter().map(|&v| v as f64).collect();
        pearson(&x, &y, 0.0)
    }

    #[test]
    fn phantom_is_deterministic_and_bounded() {
        let a = generate_phantom(&small(), 4).unwrap();
        let b = generate_phantom(&small(), 4).unwrap();
        assert_eq!(a, b);
        assert!(a.voxels.iter().all(|v| (0.0..=1.0).contains(v)));
        let c = generate_phantom(&small(), 5).unwrap();
        assert_ne!(a.voxels, c.voxels);
    }

    #[test]
    fn rejects_small_phantoms() {
        let p = PhantomParams {
            dims: [15, 32, 32],
            ..small()
        };
        assert!(generate_phantom(&p, 0).is_err());
    }

    #[test]
    fn speckle_histogram_is_unimodal() {
        let p = PhantomParams {
            dims: [48, 48, 48],
            spacing: 0.5,
            n_inclusions: 0,
        };
        let v = generate_phantom(&p, 9).unwrap();
        let mut hist = [0usize; 32];
        for x in &v.voxels {
            hist[((*x as f64 * 32.0) as usize).min(31)] += 1;
        }
        let peak = *hist.iter().max().unwrap();
        let strong: Vec<usize> = hist.iter().copied().filter(|&c| c * 20 >= peak).collect();
        let maxima = (0..strong.len())
            .filter(|&i| {
                let l = if i == 0 { 0 } else { strong[i - 1] };
                let r = strong.get(i + 1).copied().unwrap_or(0);
                strong[i] > l && strong[i] >= r
            })
            .count();
        assert_eq!(maxima, 1, "{hist:?}");
        // Rayleigh speckle is right-skewed: the mean sits above the mode.
        let mean = v.voxels.iter().map(|&x| x as f64).sum::<f64>() / v.voxels.len() as f64;
        let mode = hist.iter().position(|&c| c == peak).unwrap() as f64 / 32.0;
        assert!(mean > mode, "mean {mean} mode {mode}");
    }

    #[test]
    fn trilinear_sampling_hits_voxels_and_interpolates() {
        let mut v = Volume::zeros([2, 2, 2], [1.0, 2.0, 3.0], 0.5).unwrap();
        v.voxels = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        assert_eq!(v.sample(&Point3::new(1.5, 2.0, 3.0)), 1.0);
        assert!((v.sample(&Point3::new(1.25, 2.2, 3.3)) - 0.5).abs() < 1e-12);
        assert_eq!(v.sample(&Point3::new(0.9, 2.0, 3.0)), 0.0);
        assert_eq!(v.sample(&Point3::new(1.2, 2.0, 3.6)), 0.0);
    }

    #[test]
    fn grid_aligned_slice_equals_voxel_plane() {
        let v = generate_phantom(&small(), 1).unwrap();
        let g = FrameGeometry::new(8, 6, 0.5, 0.5).unwrap();
        // Pixel (0, 0) lands on voxel (z=10, y=4, x=3).
        let (cx, cy) = g.center_pixel();
        let pose = Pose::translation_only(
            (3.0 + cx) * 0.5,
            (4.0 + cy) * 0.5,
            10.0 * 0.5,
        );
        let f = slice_frame(&v, &pose, &g);
        for row in 0..6 {
            for col in 0..8 {
                assert_eq!(f.get(col, row), v.get(10, 4 + row, 3 + col));
            }
        }
    }

    #[test]
    fn slice_outside_phantom_is_black() {
        let v = generate_phantom(&small(), 1).unwrap();
        let g = FrameGeometry::new(8, 8, 0.5, 0.5).unwrap();
        let f = slice_frame(&v, &Pose::translation_only(0.0, 0.0, -50.0), &g);
        assert!(f.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn nearby_slices_correlate_more_than_distant_ones() {
        let mut v = generate_phantom(&small(), 3).unwrap();
        v.origin = centered_origin(&small(), 2.0);
        let g = FrameGeometry::new(24, 24, 0.5, 0.5).unwrap();
        let base = Pose::translation_only(0.0, 0.0, 5.0);
        let f0 = slice_frame(&v, &base, &g);
        let near = slice_frame(&v, &shift_along_normal(&base, 0.1), &g);
        let far = slice_frame(&v, &shift_along_normal(&base, 2.0), &g);
        assert!(ncc(&f0, &near) > ncc(&f0, &far));
    }

    #[test]
    fn constant_trajectory_ends_where_expected() {
        let spec = TrajectorySpec::constant(DofVector::translation(0.0, 0.0, 1.0));
        let poses = generate_trajectory(&spec, 11, &Pose::identity(), 0).unwrap();
        assert!((poses[10].translation() - Vector3::new(0.0, 0.0, 10.0)).amax() < 1e-12);
    }

    #[test]
    fn zero_amplitude_sinusoid_equals_constant() {
        let base = DofVector::new(0.1, 0.0, 0.8, 0.2, -0.1, 0.0);
        let jitter = DofVector::new(0.01, 0.01, 0.02, 0.05, 0.05, 0.05);
        let mut c = TrajectorySpec::constant(base);
        c.jitter = jitter;
        let mut s = TrajectorySpec::sinusoidal(base, DofVector::ZERO, 13.0);
        s.jitter = jitter;
        let start = pose_from_dof(&DofVector::new(1.0, 2.0, 3.0, 0.0, 5.0, 0.0)).unwrap();
        assert_eq!(
            generate_trajectory(&c, 30, &start, 4).unwrap(),
            generate_trajectory(&s, 30, &start, 4).unwrap()
        );
    }

    #[test]
    fn recovered_motion_matches_generated() {
        let mut spec = TrajectorySpec::sinusoidal(
            DofVector::new(0.0, 0.0, 0.6, 0.0, 0.0, 0.0),
            DofVector::new(0.05, 0.0, 0.3, 0.5, 0.3, 0.0),
            17.0,
        );
        spec.kind = TrajectoryKind::Composite;
        spec.jitter = DofVector::new(0.02, 0.02, 0.05, 0.2, 0.2, 0.2);
        let dofs = trajectory_dofs(&spec, 50, 12).unwrap();
        let poses = generate_trajectory(&spec, 50, &Pose::identity(), 12).unwrap();
        for (a, b) in relative_dofs(&poses).unwrap().iter().zip(&dofs) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }

    #[test]
    fn trajectory_validation() {
        let mut s = TrajectorySpec::sinusoidal(DofVector::ZERO, DofVector::ZERO, 1.5);
        assert!(s.validate().is_err());
        s.period = 2.0;
        assert!(s.validate().is_ok());
        s.jitter.ax = -0.1;
        assert!(s.validate().is_err());
    }

    fn sweep(noise_sd: f64) -> (Volume, Sweep) {
        let mut v = generate_phantom(&small(), 2).unwrap();
        v.origin = centered_origin(&small(), 2.0);
        let s = Sweep {
            trajectory: TrajectorySpec::sinusoidal(
                DofVector::translation(0.0, 0.0, 0.3),
                DofVector::translation(0.0, 0.0, 0.1),
                8.0,
            ),
            n_frames: 12,
            geometry: FrameGeometry::new(16, 16, 0.5, 0.5).unwrap(),
            start: Pose::identity(),
            noise_sd,
        };
        (v, s)
    }

    #[test]
    fn noiseless_scan_equals_slices() {
        let (v, s) = sweep(0.0);
        let scan = simulate_scan(&v, &s, 3, "c").unwrap();
        for (f, p) in scan.frames().iter().zip(scan.poses().unwrap()) {
            assert_eq!(*f, slice_frame(&v, p, &s.geometry));
        }
    }

    #[test]
    fn noisy_scan_is_deterministic() {
        let (v, s) = sweep(0.05);
        let a = simulate_scan(&v, &s, 3, "c").unwrap();
        let b = simulate_scan(&v, &s, 3, "c").unwrap();
        assert_eq!(a, b);
        let clean = simulate_scan(&v, &Sweep { noise_sd: 0.0, ..s }, 3, "c").unwrap();
        assert_ne!(a.frames(), clean.frames());
    }

    #[test]
    fn dataset_variation_changes_each_scan() {
        let mut cfg = SimulationConfig::desk_default();
        cfg.phantom = small();
        cfg.geometry = FrameGeometry::new(8, 8, 0.5, 0.5).unwrap();
        cfg.n_frames = 5;
        cfg.n_scans = 3;
        cfg.variation.base_spread = DofVector::translation(0.0, 0.0, 0.2);
        cfg.variation.random_phase = true;
        let a = scan_trajectory(&cfg, 1, 0);
        let b = scan_trajectory(&cfg, 1, 1);
        assert_ne!(a.base.tz, b.base.tz);
        assert!((a.base.tz - 0.6).abs() <= 0.2);
        let scans = simulate_dataset(&cfg, 1).unwrap();
        assert_eq!(scans.len(), 3);
        assert_eq!(scans[2].id, "case_002");
        assert_eq!(scans, simulate_dataset(&cfg, 1).unwrap());
    }
}
