//! Rigid-transform algebra for tracked ultrasound frames.
//!
//! A [`Pose`] is a 4x4 homogeneous matrix `[R T; 0 1]` placing a frame plane in
//! world coordinates (millimetres). A [`DofVector`] holds the six motion
//! parameters `(tx, ty, tz, ax, ay, az)` with translations in millimetres and
//! rotations in degrees.
//!
//! # Euler convention
//!
//! Rotations use fixed axes applied X, then Y, then Z:
//! `R = Rz(az) * Ry(ay) * Rx(ax)`. The decomposition is unique for
//! `|ay| < 90` degrees; at `|cos(ay)| < 1e-6` it is rejected as degenerate.
//!
//! # Frame-local coordinates
//!
//! Pixel `(u, v)` (column, row) of a `W x H` frame maps to the local point
//! `((u - (W-1)/2) * spacing_x, (v - (H-1)/2) * spacing_y, 0)`, so the frame is
//! centred on the probe origin and its normal is the local z axis.

use std::ops::{Add, Div, Mul, Sub};

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance on `R^T R = I` and `det R = 1` accepted by [`Pose::from_matrix`].
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// `|cos(ay)|` below this is treated as gimbal lock.
pub const GIMBAL_TOL: f64 = 1e-6;

/// Six-degree-of-freedom rigid motion: translations in mm, rotations in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DofVector {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

impl DofVector {
    pub const ZERO: DofVector = DofVector::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0);

    pub const fn new(tx: f64, ty: f64, tz: f64, ax: f64, ay: f64, az: f64) -> Self {
        Self {
            tx,
            ty,
            tz,
            ax,
            ay,
            az,
        }
    }

    pub const fn from_array(v: [f64; 6]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }

    pub const fn to_array(self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.ax, self.ay, self.az]
    }

    /// Pure translation.
    pub const fn translation(tx: f64, ty: f64, tz: f64) -> Self {
        Self::new(tx, ty, tz, 0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Largest absolute component-wise difference.
    pub fn max_abs_diff(&self, other: &DofVector) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Add for DofVector {
    type Output = DofVector;
    fn add(self, rhs: DofVector) -> DofVector {
        let (a, b) = (self.to_array(), rhs.to_array());
        DofVector::from_array(std::array::from_fn(|i| a[i] + b[i]))
    }
}

impl Sub for DofVector {
    type Output = DofVector;
    fn sub(self, rhs: DofVector) -> DofVector {
        let (a, b) = (self.to_array(), rhs.to_array());
        DofVector::from_array(std::array::from_fn(|i| a[i] - b[i]))
    }
}

impl Mul<f64> for DofVector {
    type Output = DofVector;
    fn mul(self, s: f64) -> DofVector {
        DofVector::from_array(self.to_array().map(|v| v * s))
    }
}

impl Div<f64> for DofVector {
    type Output = DofVector;
    fn div(self, s: f64) -> DofVector {
        DofVector::from_array(self.to_array().map(|v| v / s))
    }
}

/// Pixel grid of a 2D frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub width: usize,
    pub height: usize,
    /// mm per pixel along columns.
    pub spacing_x: f64,
    /// mm per pixel along rows.
    pub spacing_y: f64,
}

impl FrameGeometry {
    pub fn new(width: usize, height: usize, spacing_x: f64, spacing_y: f64) -> Result<Self> {
        let g = Self {
            width,
            height,
            spacing_x,
            spacing_y,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(invalid(format!(
                "frame must be at least 2x2 pixels, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.spacing_x > 0.0 && self.spacing_y > 0.0)
            || !self.spacing_x.is_finite()
            || !self.spacing_y.is_finite()
        {
            return Err(invalid("pixel spacing must be positive and finite"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Frame-local position (mm) of pixel `(u, v)`; `u` indexes columns.
    pub fn local_point(&self, u: f64, v: f64) -> Point3<f64> {
        Point3::new(
            (u - (self.width as f64 - 1.0) / 2.0) * self.spacing_x,
            (v - (self.height as f64 - 1.0) / 2.0) * self.spacing_y,
            0.0,
        )
    }

    /// Frame-local position of the frame centre, which is the local origin.
    pub fn center_pixel(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }
}

/// Homogeneous rigid transform `[R T; 0 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    m: Matrix4<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            m: Matrix4::identity(),
        }
    }

    /// Validating constructor.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("pose matrix has non-finite entries"));
        }
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(invalid("pose bottom row must be exactly (0, 0, 0, 1)"));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        if orthonormality_error(&r) > ORTHONORMAL_TOL {
            return Err(invalid("pose rotation block is not orthonormal"));
        }
        if (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(invalid("pose rotation block must have determinant +1"));
        }
        Ok(Self { m })
    }

    pub(crate) fn from_rt(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { m }
    }

    pub fn translation_only(tx: f64, ty: f64, tz: f64) -> Self {
        Self::from_rt(Matrix3::identity(), Vector3::new(tx, ty, tz))
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.m[(0, 3)], self.m[(1, 3)], self.m[(2, 3)])
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        Pose::from_rt(rt, -(rt * self.translation()))
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * p.coords + self.translation())
    }

    /// Largest absolute entry-wise difference between the two matrices.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.m - other.m).amax()
    }

    /// World position of frame pixel `(u, v)`.
    pub fn pixel_to_world(&self, g: &FrameGeometry, u: f64, v: f64) -> Point3<f64> {
        self.transform_point(&g.local_point(u, v))
    }
}

/// `max |R^T R - I|` entry-wise.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Builds the pose `[Rz(az) Ry(ay) Rx(ax), (tx, ty, tz)]`.
pub fn pose_from_dof(dof: &DofVector) -> Result<Pose> {
    if !dof.is_finite() {
        return Err(invalid("DOF vector has non-finite components"));
    }
    let r = rot_z(dof.az.to_radians()) * rot_y(dof.ay.to_radians()) * rot_x(dof.ax.to_radians());
    Ok(Pose::from_rt(r, Vector3::new(dof.tx, dof.ty, dof.tz)))
}

/// Inverse of [`pose_from_dof`] on the branch `|ay| < 90` degrees.
pub fn dof_from_pose(pose: &Pose) -> Result<DofVector> {
    let r = pose.rotation();
    let cos_y = r[(0, 0)].hypot(r[(1, 0)]);
    if cos_y < GIMBAL_TOL {
        return Err(Error::DegenerateDecomposition(format!(
            "|cos(ay)| = {cos_y:.3e} is below {GIMBAL_TOL:e} (gimbal lock)"
        )));
    }
    let ay = (-r[(2, 0)]).atan2(cos_y);
    let ax = r[(2, 1)].atan2(r[(2, 2)]);
    let az = r[(1, 0)].atan2(r[(0, 0)]);
    let t = pose.translation();
    Ok(DofVector::new(
        t.x,
        t.y,
        t.z,
        ax.to_degrees(),
        ay.to_degrees(),
        az.to_degrees(),
    ))
}

/// `a * b`, re-projecting the rotation block onto SO(3) when round-off has
/// pushed it more than [`ORTHONORMAL_TOL`] away.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let m = a.m * b.m;
    let mut out = Pose { m };
    out.m[(3, 0)] = 0.0;
    out.m[(3, 1)] = 0.0;
    out.m[(3, 2)] = 0.0;
    out.m[(3, 3)] = 1.0;
    let r = out.rotation();
    if orthonormality_error(&r) > ORTHONORMAL_TOL {
        out = Pose::from_rt(polar_rotation(&r), out.translation());
    }
    out
}

/// Closest rotation in the Frobenius sense (`U V^T` from the SVD).
fn polar_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut q = u * v_t;
    if q.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        q = u * v_t;
    }
    q
}

/// Motion carrying frame `i` onto frame `i+1`: `M_next * M_i^{-1}`.
pub fn relative_pose(current: &Pose, next: &Pose) -> Pose {
    compose(next, &current.inverse())
}

/// Component-wise arithmetic mean of the inter-frame motions in a window.
pub fn mean_dof(dofs: &[DofVector]) -> Result<DofVector> {
    if dofs.is_empty() {
        return Err(invalid("mean of an empty DOF list"));
    }
    let sum = dofs.iter().fold(DofVector::ZERO, |acc, d| acc + *d);
    Ok(sum / dofs.len() as f64)
}

/// Chains relative motions from `start`: `M_{i+1} = pose_from_dof(theta_i) * M_i`.
pub fn accumulate_trajectory(start: &Pose, relatives: &[DofVector]) -> Result<Vec<Pose>> {
    let mut out = Vec::with_capacity(relatives.len() + 1);
    out.push(*start);
    for dof in relatives {
        let step = pose_from_dof(dof)?;
        let next = compose(&step, out.last().expect("non-empty"));
        out.push(next);
    }
    Ok(out)
}

/// World positions of the corner pixels `(0,0), (W-1,0), (0,H-1), (W-1,H-1)`.
pub fn frame_corners(pose: &Pose, g: &FrameGeometry) -> [Point3<f64>; 4] {
    let (w, h) = ((g.width - 1) as f64, (g.height - 1) as f64);
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)].map(|(u, v)| pose.pixel_to_world(g, u, v))
}

/// World position of the frame centre pixel.
pub fn frame_center(pose: &Pose, g: &FrameGeometry) -> Point3<f64> {
    let (u, v) = g.center_pixel();
    pose.pixel_to_world(g, u, v)
}

/// Inter-frame motions of a pose sequence.
pub fn relative_dofs(poses: &[Pose]) -> Result<Vec<DofVector>> {
    poses
        .windows(2)
        .map(|w| dof_from_pose(&relative_pose(&w[0], &w[1])))
        .collect()
}
