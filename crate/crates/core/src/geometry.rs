//! Pinhole cameras, rigid poses and ground-plane homographies.
//!
//! World space is in millimeters with X and Y parallel to the ground and Z
//! pointing up. Pixels are addressed as `(u, v)` = (column, row); integer
//! coordinates are pixel centers. No lens distortion is modelled.

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type CameraId = u32;
pub type MarkerId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive camera depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),
    #[error("ground-plane homography is degenerate (condition number {0:e})")]
    DegenerateView(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Whether a pixel lies inside the image, treating each pixel as the
    /// unit square around its center.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5 && pixel.y >= -0.5 && pixel.x < self.width as f64 - 0.5 && pixel.y < self.height as f64 - 0.5
    }
}

/// Rigid transform mapping world coordinates into camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    q: [f64; 4],
    t_mm: [f64; 3],
}

impl TryFrom<PoseRepr> for Pose {
    type Error = GeometryError;

    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        Pose::from_wxyz(r.q, Vector3::from(r.t_mm))
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.rotation.quaternion();
        PoseRepr { q: [q.w, q.i, q.j, q.k], t_mm: p.translation.into() }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose from a `[w, x, y, z]` quaternion. Inputs within 1e-6 of
    /// unit norm are renormalized; anything further off is rejected.
    pub fn from_wxyz(q: [f64; 4], translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidPose(format!("quaternion norm {norm} is not 1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite translation".into()));
        }
        Ok(Self { rotation: UnitQuaternion::from_quaternion(quat), translation })
    }

    /// World→camera pose of a camera centered at `eye` looking at `target`,
    /// with image rows running along world `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Option<Self> {
        let z = (target - eye).try_normalize(1e-12)?;
        let x = z.cross(&up).try_normalize(1e-12)?;
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&r);
        Some(Self { rotation, translation: -(rotation * eye) })
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self { rotation: inv, translation: -(inv * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Least-squares rigid transform taking `src[i]` onto `dst[i]` (Kabsch).
    /// Needs at least three non-collinear correspondences.
    pub fn align_points(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Self> {
        if src.len() != dst.len() || src.len() < 3 {
            return None;
        }
        let n = src.len() as f64;
        let cs = src.iter().sum::<Vector3<f64>>() / n;
        let cd = dst.iter().sum::<Vector3<f64>>() / n;
        let mut h = Matrix3::zeros();
        for (s, d) in src.iter().zip(dst) {
            h += (s - cs) * (d - cd).transpose();
        }
        let svd = h.svd(true, true);
        let (u, v_t) = (svd.u?, svd.v_t?);
        if svd.singular_values[1] < 1e-9 * svd.singular_values[0].max(1e-300) {
            return None;
        }
        let mut d = Matrix3::identity();
        if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let r = v_t.transpose() * d * u.transpose();
        let rotation = UnitQuaternion::from_matrix(&r);
        Some(Self { rotation, translation: cd - rotation * cs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub id: CameraId,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl CameraModel {
    pub fn new(id: CameraId, intrinsics: CameraIntrinsics, pose: Pose) -> Self {
        Self { id, intrinsics, pose }
    }

    pub fn to_camera(&self, world_point: &Vector3<f64>) -> Vector3<f64> {
        self.pose.transform(world_point)
    }

    /// Projects a point already expressed in the camera frame.
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !(pc.z > 0.0) {
            return Err(GeometryError::NonPositiveDepth(pc.z));
        }
        let k = &self.intrinsics;
        Ok(Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
    }

    pub fn project_point(&self, world_point: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        self.project_camera_point(&self.to_camera(world_point))
    }

    /// Lifts a pixel with z-depth (along the optical axis) into the camera frame.
    pub fn backproject_to_camera(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if !(depth > 0.0) {
            return Err(GeometryError::InvalidDepth(depth));
        }
        let k = &self.intrinsics;
        Ok(Vector3::new((pixel.x - k.cx) / k.fx * depth, (pixel.y - k.cy) / k.fy * depth, depth))
    }

    pub fn backproject_pixel(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        let pc = self.backproject_to_camera(pixel, depth)?;
        Ok(self.pose.inverse().transform(&pc))
    }

    /// World-frame unit ray direction through a pixel center, scaled so its
    /// camera-frame z component equals 1.
    pub fn pixel_ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let k = &self.intrinsics;
        let dc = Vector3::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0);
        self.pose.rotation.inverse() * dc
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    /// Homography from image pixels to continuous ground-grid cell
    /// coordinates on the `z = 0` plane. Cell `(m, n)` spans `[m, m+1) × [n, n+1)`.
    pub fn ground_plane_homography(&self, grid: &GroundGrid, max_condition: f64) -> Result<Matrix3<f64>, GeometryError> {
        let r = self.pose.rotation.to_rotation_matrix();
        let r = r.matrix();
        let t = self.pose.translation;
        let plane = Matrix3::from_columns(&[r.column(0).into_owned(), r.column(1).into_owned(), t]);
        let cell_to_world = Matrix3::new(grid.cell_mm, 0.0, grid.origin_x, 0.0, grid.cell_mm, grid.origin_y, 0.0, 0.0, 1.0);
        let grid_to_image = self.intrinsics.matrix() * plane * cell_to_world;
        let sv = grid_to_image.singular_values();
        let (max, min) = (sv.max(), sv.min());
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        if !cond.is_finite() || cond > max_condition {
            return Err(GeometryError::DegenerateView(cond));
        }
        grid_to_image.try_inverse().ok_or(GeometryError::DegenerateView(f64::INFINITY))
    }
}

/// Default bound on the homography condition number.
pub const DEFAULT_MAX_HOMOGRAPHY_CONDITION: f64 = 1e12;

/// Placement of a regular cell grid on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundGrid {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_mm: f64,
}

impl GroundGrid {
    pub fn world_to_cell(&self, x: f64, y: f64) -> Vector2<f64> {
        Vector2::new((x - self.origin_x) / self.cell_mm, (y - self.origin_y) / self.cell_mm)
    }

    pub fn cell_center(&self, m: usize, n: usize) -> Vector2<f64> {
        Vector2::new(
            self.origin_x + (m as f64 + 0.5) * self.cell_mm,
            self.origin_y + (n as f64 + 0.5) * self.cell_mm,
        )
    }
}

/// Applies a homography to a 2D point in inhomogeneous coordinates.
pub fn apply_homography(h: &Matrix3<f64>, p: &Vector2<f64>) -> Option<Vector2<f64>> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    if q.z.abs() < 1e-15 {
        None
    } else {
        Some(Vector2::new(q.x / q.z, q.y / q.z))
    }
}

pub fn point3(p: &Vector3<f64>) -> Point3<f64> {
    Point3::from(*p)
}
