//! Scan persistence and conversion of tracked scans into labelled windows.
//!
//! A scan directory holds three files:
//!
//! - `meta.json`: `{id, W, H, spacing_x, spacing_y, frame_count, has_poses}`
//! - `frames.f32`: pixels as little-endian `f32`, row-major `[frame][row][col]`
//! - `poses.csv`: header `frame,tx,ty,tz,ax,ay,az`, one absolute world pose per
//!   frame in the fixed X-Y-Z Euler convention of [`crate::geom`] (degrees).
//!   Absent when the scan carries no ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom::{dof_from_pose, mean_dof, pose_from_dof, relative_pose, DofVector, FrameGeometry, Pose};

pub const META_FILE: &str = "meta.json";
pub const FRAMES_FILE: &str = "frames.f32";
pub const POSES_FILE: &str = "poses.csv";

const POSE_HEADER: [&str; 7] = ["frame", "tx", "ty", "tz", "ax", "ay", "az"];

/// One 2D image, intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(invalid(format!(
                "frame buffer has {} pixels, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    /// Builds a frame from `f(u, v)` (column, row), clamping into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                pixels.push(f(u, v).clamp(0.0, 1.0) as f32);
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Pixel at column `u`, row `v`.
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.pixels[v * self.width + u]
    }
}

/// Ordered frames of one sweep with optional ground-truth poses.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSequence {
    pub id: String,
    pub geometry: FrameGeometry,
    frames: Vec<Frame>,
    poses: Option<Vec<Pose>>,
}

impl ScanSequence {
    pub fn new(
        id: impl Into<String>,
        geometry: FrameGeometry,
        frames: Vec<Frame>,
        poses: Option<Vec<Pose>>,
    ) -> Result<Self> {
        geometry.validate()?;
        if frames.len() < 2 {
            return Err(invalid(format!(
                "a scan needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        if let Some(f) = frames
            .iter()
            .find(|f| f.width != geometry.width || f.height != geometry.height)
        {
            return Err(invalid(format!(
                "frame is {}x{} but the scan geometry is {}x{}",
                f.width, f.height, geometry.width, geometry.height
            )));
        }
        if let Some(p) = &poses {
            if p.len() != frames.len() {
                return Err(invalid(format!(
                    "{} poses for {} frames",
                    p.len(),
                    frames.len()
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            geometry,
            frames,
            poses,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn poses(&self) -> Option<&[Pose]> {
        self.poses.as_deref()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Ground-truth inter-frame motions, if poses are present.
    pub fn relative_dofs(&self) -> Option<Result<Vec<DofVector>>> {
        self.poses.as_deref().map(crate::geom::relative_dofs)
    }

    pub(crate) fn require_poses(&self) -> Result<&[Pose]> {
        self.poses
            .as_deref()
            .ok_or_else(|| invalid(format!("scan '{}' has no ground-truth poses", self.id)))
    }
}

/// `len` consecutive frames of a scan starting at `start`, with the mean
/// inter-frame motion as label when poses are known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub label: Option<DofVector>,
}

impl Window {
    pub fn frames<'a>(&self, scan: &'a ScanSequence) -> &'a [Frame] {
        &scan.frames()[self.start..self.start + self.len]
    }
}

/// Mean of the `n - 1` inter-frame motions covered by frames `start..start+n`.
pub fn window_label(poses: &[Pose], start: usize, n: usize) -> Result<DofVector> {
    let dofs = poses[start..start + n]
        .windows(2)
        .map(|w| dof_from_pose(&relative_pose(&w[0], &w[1])))
        .collect::<Result<Vec<_>>>()?;
    mean_dof(&dofs)
}

/// Windows starting at `0, stride, 2*stride, ...` while `start + n <= F`.
pub fn make_windows(scan: &ScanSequence, n: usize, stride: usize) -> Result<Vec<Window>> {
    if n < 2 {
        return Err(invalid(format!("window length must be at least 2, got {n}")));
    }
    if n > scan.len() {
        return Err(invalid(format!(
            "window length {n} exceeds scan length {}",
            scan.len()
        )));
    }
    if stride == 0 {
        return Err(invalid("window stride must be at least 1"));
    }
    (0..=scan.len() - n)
        .step_by(stride)
        .map(|start| {
            let label = scan
                .poses()
                .map(|p| window_label(p, start, n))
                .transpose()?;
            Ok(Window {
                start,
                len: n,
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScanMeta {
    id: String,
    #[serde(rename = "W")]
    width: usize,
    #[serde(rename = "H")]
    height: usize,
    spacing_x: f64,
    spacing_y: f64,
    frame_count: usize,
    has_poses: bool,
}

/// Writes `scan` into directory `dir`, creating it if needed.
pub fn save_scan(scan: &ScanSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = ScanMeta {
        id: scan.id.clone(),
        width: scan.geometry.width,
        height: scan.geometry.height,
        spacing_x: scan.geometry.spacing_x,
        spacing_y: scan.geometry.spacing_y,
        frame_count: scan.len(),
        has_poses: scan.poses.is_some(),
    };
    fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;

    let mut blob = Vec::with_capacity(scan.len() * scan.geometry.pixel_count() * 4);
    for f in scan.frames() {
        for p in f.pixels() {
            blob.extend_from_slice(&p.to_le_bytes());
        }
    }
    fs::write(dir.join(FRAMES_FILE), blob)?;

    let pose_path = dir.join(POSES_FILE);
    match scan.poses() {
        Some(poses) => write_pose_table(&pose_path, poses)?,
        None => {
            if pose_path.exists() {
                fs::remove_file(&pose_path)?;
            }
        }
    }
    Ok(())
}

/// Writes poses as `frame,tx,ty,tz,ax,ay,az` rows.
pub fn write_pose_table(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(POSE_HEADER)?;
    for (i, p) in poses.iter().enumerate() {
        let d = dof_from_pose(p)?;
        let mut row = vec![i.to_string()];
        row.extend(d.to_array().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `frame,tx,ty,tz,ax,ay,az` table back into poses.
pub fn read_pose_table(path: &Path) -> Result<Vec<Pose>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().map(str::trim).ne(POSE_HEADER) {
        return Err(Error::Format(format!(
            "{}: expected header {:?}",
            path.display(),
            POSE_HEADER.join(",")
        )));
    }
    let mut poses = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::Format(format!(
                "{}: row {row} has {} columns, expected 7",
                path.display(),
                rec.len()
            )));
        }
        let parse = |k: usize| -> Result<f64> {
            rec[k].trim().parse::<f64>().map_err(|_| {
                Error::Format(format!(
                    "{}: row {row} column '{}' is not a number: '{}'",
                    path.display(),
                    POSE_HEADER[k],
                    &rec[k]
                ))
            })
        };
        let index = parse(0)?;
        if index != row as f64 {
            return Err(Error::Format(format!(
                "{}: row {row} is labelled frame {index}",
                path.display()
            )));
        }
        let d = DofVector::new(parse(1)?, parse(2)?, parse(3)?, parse(4)?, parse(5)?, parse(6)?);
        poses.push(pose_from_dof(&d).map_err(|e| {
            Error::Format(format!("{}: row {row}: {e}", path.display()))
        })?);
    }
    Ok(poses)
}

/// Reads a scan directory written by [`save_scan`].
pub fn load_scan(dir: impl AsRef<Path>) -> Result<ScanSequence> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(Error::NotFound(meta_path));
    }
    let meta: ScanMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
    let geometry = FrameGeometry::new(meta.width, meta.height, meta.spacing_x, meta.spacing_y)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;

    let blob_path = dir.join(FRAMES_FILE);
    if !blob_path.exists() {
        return Err(Error::NotFound(blob_path));
    }
    let blob = fs::read(&blob_path)?;
    let per_frame = geometry.pixel_count();
    let expected = per_frame * meta.frame_count * 4;
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, metadata implies {} ({} frames of {}x{})",
            blob_path.display(),
            blob.len(),
            expected,
            meta.frame_count,
            meta.width,
            meta.height
        )));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let frames = values
        .chunks_exact(per_frame)
        .map(|px| Frame::new(meta.width, meta.height, px.to_vec()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Format(format!("{}: {e}", blob_path.display())))?;

    let poses = if meta.has_poses {
        let poses = read_pose_table(&dir.join(POSES_FILE))?;
        if poses.len() != meta.frame_count {
            return Err(Error::Format(format!(
                "{}: {} pose rows for {} frames",
                dir.join(POSES_FILE).display(),
                poses.len(),
                meta.frame_count
            )));
        }
        Some(poses)
    } else {
        None
    };
    ScanSequence::new(meta.id, geometry, frames, poses)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.display())))
}

/// Sub-directories of `root` containing a `meta.json`, sorted by name.
pub fn scan_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Loads every scan below `root` (see [`scan_dirs`]); a root that is itself a
/// scan directory yields that single scan.
pub fn load_scans(root: impl AsRef<Path>) -> Result<Vec<ScanSequence>> {
    let root = root.as_ref();
    if root.join(META_FILE).is_file() {
        return Ok(vec![load_scan(root)?]);
    }
    scan_dirs(root)?.iter().map(load_scan).collect()
}
