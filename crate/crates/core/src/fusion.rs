//! Depth fusion: synchronized depth frames → world point cloud → binary
//! voxel grid → top-down heightmap.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraId, CameraModel, GroundGrid};

/// Paper-default voxel edge length.
pub const DEFAULT_CELL_MM: f64 = 20.0;
/// Depth readings beyond this are treated as outliers.
pub const DEFAULT_MAX_DEPTH_MM: u16 = 6000;
pub const DEFAULT_Z_MAX_MM: f64 = 2600.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("frame references unknown camera {0}")]
    UnknownCamera(CameraId),
    #[error("frames carry different frame indices ({0} and {1})")]
    MismatchedFrameIndex(u64, u64),
    #[error("grid has a zero dimension or non-positive cell size")]
    EmptyGrid,
    #[error("depth frame {camera}/{frame}: {reason}")]
    BadFrame { camera: CameraId, frame: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthFrame {
    pub camera_id: CameraId,
    pub frame_index: u64,
    pub timestamp_ms: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major depth in millimeters; 0 marks a missing measurement.
    pub depth: Vec<u16>,
    /// Optional RGB registered to the depth pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Vec<[u8; 3]>>,
}

impl DepthFrame {
    pub fn new(camera_id: CameraId, frame_index: u64, width: u32, height: u32, depth: Vec<u16>) -> Result<Self, FusionError> {
        let f = Self { camera_id, frame_index, timestamp_ms: 0.0, width, height, depth, color: None };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let n = self.width as usize * self.height as usize;
        let bad = |reason: String| FusionError::BadFrame { camera: self.camera_id, frame: self.frame_index, reason };
        if self.depth.len() != n {
            return Err(bad(format!("depth length {} != {}x{}", self.depth.len(), self.width, self.height)));
        }
        if let Some(c) = &self.color {
            if c.len() != n {
                return Err(bad(format!("color length {} != {}", c.len(), n)));
            }
        }
        Ok(())
    }

    pub fn at(&self, u: u32, v: u32) -> u16 {
        self.depth[(v * self.width + u) as usize]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    pub max_depth_mm: u16,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { max_depth_mm: DEFAULT_MAX_DEPTH_MM }
    }
}

/// Per-camera table of world-frame pixel rays; `center + depth * ray` is the
/// backprojected point.
#[derive(Debug, Clone)]
pub struct Backprojector {
    width: u32,
    height: u32,
    center: Vector3<f64>,
    rays: Vec<Vector3<f64>>,
}

impl Backprojector {
    pub fn new(camera: &CameraModel) -> Self {
        let k = &camera.intrinsics;
        let mut rays = Vec::with_capacity(k.width as usize * k.height as usize);
        for v in 0..k.height {
            for u in 0..k.width {
                rays.push(camera.pixel_ray(&Vector2::new(u as f64, v as f64)));
            }
        }
        Self { width: k.width, height: k.height, center: camera.center(), rays }
    }

    fn backproject_into(&self, frame: &DepthFrame, params: &FusionParams, cloud: &mut PointCloud) -> Result<(), FusionError> {
        frame.validate()?;
        if frame.width != self.width || frame.height != self.height {
            return Err(FusionError::BadFrame {
                camera: frame.camera_id,
                frame: frame.frame_index,
                reason: format!("frame is {}x{}, camera is {}x{}", frame.width, frame.height, self.width, self.height),
            });
        }
        for (i, &d) in frame.depth.iter().enumerate() {
            if d == 0 || d > params.max_depth_mm {
                continue;
            }
            cloud.points.push(self.center + self.rays[i] * d as f64);
            if let (Some(out), Some(src)) = (cloud.colors.as_mut(), frame.color.as_ref()) {
                out.push(src[i]);
            }
        }
        Ok(())
    }
}

/// Reusable fusion front-end with cached per-camera ray tables.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    cameras: HashMap<CameraId, Backprojector>,
    pub params: FusionParams,
}

impl Reconstructor {
    pub fn new(rig: &[CameraModel], params: FusionParams) -> Self {
        Self { cameras: rig.iter().map(|c| (c.id, Backprojector::new(c))).collect(), params }
    }

    pub fn reconstruct(&self, frames: &[DepthFrame]) -> Result<PointCloud, FusionError> {
        if let Some(first) = frames.first() {
            if let Some(f) = frames.iter().find(|f| f.frame_index != first.frame_index) {
                return Err(FusionError::MismatchedFrameIndex(first.frame_index, f.frame_index));
            }
        }
        let colored = !frames.is_empty() && frames.iter().all(|f| f.color.is_some());
        let mut cloud = PointCloud { points: Vec::new(), colors: colored.then(Vec::new) };
        for f in frames {
            let bp = self.cameras.get(&f.camera_id).ok_or(FusionError::UnknownCamera(f.camera_id))?;
            bp.backproject_into(f, &self.params, &mut cloud)?;
        }
        Ok(cloud)
    }
}

/// Union over cameras and valid pixels of backprojected world points.
pub fn reconstruct_point_cloud(frames: &[DepthFrame], rig: &[CameraModel], params: &FusionParams) -> Result<PointCloud, FusionError> {
    for f in frames {
        if !rig.iter().any(|c| c.id == f.camera_id) {
            return Err(FusionError::UnknownCamera(f.camera_id));
        }
    }
    let used: Vec<CameraModel> = rig.iter().filter(|c| frames.iter().any(|f| f.camera_id == c.id)).cloned().collect();
    Reconstructor::new(&used, *params).reconstruct(frames)
}

/// Axis-aligned voxel lattice. Voxel `(m, n, k)` covers the half-open cube
/// `origin + [m, m+1) × [n, n+1) × [k, k+1)` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub dims: [usize; 3],
    pub cell_mm: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.dims.contains(&0) || !(self.cell_mm > 0.0) {
            return Err(FusionError::EmptyGrid);
        }
        Ok(())
    }

    pub fn ground(&self) -> GroundGrid {
        GroundGrid { origin_x: self.origin[0], origin_y: self.origin[1], cell_mm: self.cell_mm }
    }

    /// Index of the voxel containing `p`, or `None` outside the grid.
    pub fn index_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.cell_mm).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + (idx[0] as f64 + 0.5) * self.cell_mm,
            self.origin[1] + (idx[1] as f64 + 0.5) * self.cell_mm,
            self.origin[2] + (idx[2] as f64 + 0.5) * self.cell_mm,
        )
    }

    /// Grid covering the rig's ground footprint plus `margin_mm`, with
    /// `z ∈ [0, z_max_mm]`. The footprint is where the image corners' rays
    /// meet the floor, capped at `max_range_mm` from each camera.
    pub fn from_rig(rig: &[CameraModel], margin_mm: f64, z_max_mm: f64, max_range_mm: f64, cell_mm: f64) -> Result<Self, FusionError> {
        if rig.is_empty() || !(cell_mm > 0.0) || !(z_max_mm > 0.0) {
            return Err(FusionError::EmptyGrid);
        }
        let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
        let mut include = |x: f64, y: f64| {
            lo.x = lo.x.min(x);
            lo.y = lo.y.min(y);
            hi.x = hi.x.max(x);
            hi.y = hi.y.max(y);
        };
        for cam in rig {
            let c = cam.center();
            include(c.x, c.y);
            let k = &cam.intrinsics;
            let (w, h) = (k.width as f64 - 1.0, k.height as f64 - 1.0);
            for px in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h), (k.cx, k.cy)] {
                let ray = cam.pixel_ray(&Vector2::new(px.0, px.1));
                let dir = ray.normalize();
                let mut reach = max_range_mm;
                if dir.z < -1e-9 {
                    reach = reach.min(-c.z / dir.z);
                }
                let p = c + dir * reach;
                include(p.x, p.y);
            }
        }
        let lo = lo - Vector2::repeat(margin_mm);
        let hi = hi + Vector2::repeat(margin_mm);
        let spec = Self {
            origin: [lo.x, lo.y, 0.0],
            dims: [
                ((hi.x - lo.x) / cell_mm).ceil() as usize,
                ((hi.y - lo.y) / cell_mm).ceil() as usize,
                (z_max_mm / cell_mm).ceil() as usize,
            ],
            cell_mm,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Binary occupancy grid stored as one bit-packed column per ground cell.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    words_per_column: usize,
    bits: Vec<u64>,
    /// Points that fell outside the grid during voxelization.
    pub dropped: usize,
}

impl VoxelGrid {
    pub fn new(spec: GridSpec) -> Result<Self, FusionError> {
        spec.validate()?;
        let words_per_column = spec.dims[2].div_ceil(64);
        Ok(Self { spec, words_per_column, bits: vec![0; spec.dims[0] * spec.dims[1] * words_per_column], dropped: 0 })
    }

    fn column_offset(&self, m: usize, n: usize) -> usize {
        (m * self.spec.dims[1] + n) * self.words_per_column
    }

    pub fn set(&mut self, [m, n, k]: [usize; 3]) {
        let o = self.column_offset(m, n);
        self.bits[o + k / 64] |= 1u64 << (k % 64);
    }

    pub fn get(&self, [m, n, k]: [usize; 3]) -> bool {
        let o = self.column_offset(m, n);
        self.bits[o + k / 64] >> (k % 64) & 1 == 1
    }

    pub fn clear(&mut self) {
        self.bits.fill(0);
        self.dropped = 0;
    }

    pub fn insert(&mut self, p: &Vector3<f64>) -> bool {
        match self.spec.index_of(p) {
            Some(idx) => {
                self.set(idx);
                true
            }
            None => {
                self.dropped += 1;
                false
            }
        }
    }

    /// Highest occupied z-index in a column.
    pub fn column_top(&self, m: usize, n: usize) -> Option<usize> {
        let o = self.column_offset(m, n);
        for w in (0..self.words_per_column).rev() {
            let word = self.bits[o + w];
            if word != 0 {
                return Some(w * 64 + 63 - word.leading_zeros() as usize);
            }
        }
        None
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn occupied(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, nz] = self.spec.dims;
        (0..nx).flat_map(move |m| {
            (0..ny).flat_map(move |n| (0..nz).filter(move |&k| self.get([m, n, k])).map(move |k| [m, n, k]))
        })
    }
}

pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> Result<VoxelGrid, FusionError> {
    let mut grid = VoxelGrid::new(*spec)?;
    for p in &cloud.points {
        grid.insert(p);
    }
    Ok(grid)
}

/// Top-down heightmap: per ground cell, the z-index of the highest occupied
/// voxel, with 0 for an empty column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopDownMap {
    pub nx: usize,
    pub ny: usize,
    pub ground: GroundGrid,
    /// Indexed `m * ny + n`.
    pub values: Vec<u16>,
}

impl TopDownMap {
    pub fn zeros(nx: usize, ny: usize, ground: GroundGrid) -> Self {
        Self { nx, ny, ground, values: vec![0; nx * ny] }
    }

    pub fn get(&self, m: usize, n: usize) -> u16 {
        self.values[m * self.ny + n]
    }

    pub fn set(&mut self, m: usize, n: usize, v: u16) {
        self.values[m * self.ny + n] = v;
    }

    /// Value at a signed cell, 0 outside the map.
    pub fn get_or_zero(&self, m: i64, n: i64) -> u16 {
        if m < 0 || n < 0 || m >= self.nx as i64 || n >= self.ny as i64 {
            0
        } else {
            self.get(m as usize, n as usize)
        }
    }

    pub fn cell_mm(&self) -> f64 {
        self.ground.cell_mm
    }
}

pub fn topdown_heightmap(grid: &VoxelGrid) -> TopDownMap {
    let [nx, ny, _] = grid.spec.dims;
    let mut map = TopDownMap::zeros(nx, ny, grid.spec.ground());
    for m in 0..nx {
        for n in 0..ny {
            if let Some(k) = grid.column_top(m, n) {
                map.set(m, n, k.min(u16::MAX as usize) as u16);
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(n: usize) -> GridSpec {
        GridSpec { origin: [0.0; 3], dims: [n, n, n], cell_mm: 20.0 }
    }

    #[test]
    fn all_invalid_depth_gives_empty_cloud() {
        let k = CameraIntrinsics::new(100.0, 100.0, 4.0, 3.0, 8, 6).unwrap();
        let cam = CameraModel::new(1, k, Pose::identity());
        let f = DepthFrame::new(1, 0, 8, 6, vec![0; 48]).unwrap();
        let cloud = reconstruct_point_cloud(&[f], &[cam], &FusionParams::default()).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn single_principal_pixel_lands_on_axis() {
        let k = CameraIntrinsics::new(100.0, 100.0, 4.0, 3.0, 8, 6).unwrap();
        let cam = CameraModel::new(1, k, Pose::identity());
        let mut depth = vec![0; 48];
        depth[3 * 8 + 4] = 1000;
        let f = DepthFrame::new(1, 0, 8, 6, depth).unwrap();
        let cloud = reconstruct_point_cloud(&[f], &[cam], &FusionParams::default()).unwrap();
        assert_eq!(cloud.points, vec![Vector3::new(0.0, 0.0, 1000.0)]);
    }

    #[test]
    fn depth_cutoff_and_frame_errors() {
        let k = CameraIntrinsics::new(100.0, 100.0, 1.0, 1.0, 2, 2).unwrap();
        let cam = CameraModel::new(1, k, Pose::identity());
        let f = DepthFrame::new(1, 0, 2, 2, vec![6001, 6000, 0, 1]).unwrap();
        let cloud = reconstruct_point_cloud(&[f.clone()], &[cam.clone()], &FusionParams::default()).unwrap();
        assert_eq!(cloud.len(), 2);

        let mut other = f.clone();
        other.camera_id = 9;
        assert_eq!(reconstruct_point_cloud(&[other], &[cam.clone()], &FusionParams::default()), Err(FusionError::UnknownCamera(9)));

        let mut later = f.clone();
        later.frame_index = 3;
        assert_eq!(
            reconstruct_point_cloud(&[f, later], &[cam], &FusionParams::default()),
            Err(FusionError::MismatchedFrameIndex(0, 3))
        );
    }

    #[test]
    fn boundary_point_goes_to_higher_cell() {
        let cloud = PointCloud { points: vec![Vector3::new(40.0, 20.0, 60.0)], colors: None };
        let g = voxelize(&cloud, &spec(8)).unwrap();
        assert!(g.get([2, 1, 3]));
        assert_eq!(g.occupied_count(), 1);
        let again = voxelize(&cloud, &spec(8)).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn empty_grid_and_empty_cloud() {
        assert_eq!(voxelize(&PointCloud::default(), &GridSpec { dims: [0, 4, 4], ..spec(4) }).unwrap_err(), FusionError::EmptyGrid);
        let g = voxelize(&PointCloud::default(), &spec(4)).unwrap();
        assert_eq!(g.occupied_count(), 0);
        assert!(topdown_heightmap(&g).values.iter().all(|&v| v == 0));
    }

    #[test]
    fn out_of_grid_points_are_counted() {
        let cloud = PointCloud {
            points: vec![Vector3::new(-1.0, 0.0, 0.0), Vector3::new(10.0, 10.0, 10.0), Vector3::new(0.0, 0.0, 160.0)],
            colors: None,
        };
        let g = voxelize(&cloud, &spec(8)).unwrap();
        assert_eq!(g.dropped, 2);
        assert_eq!(g.occupied_count(), 1);
    }

    #[test]
    fn voxelization_matches_brute_force_scan() {
        let s = GridSpec { origin: [-100.0, 50.0, 0.0], dims: [30, 20, 70], cell_mm: 20.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points: Vec<_> = (0..10_000)
            .map(|_| Vector3::new(rng.random_range(-200.0..600.0), rng.random_range(0.0..500.0), rng.random_range(-50.0..1500.0)))
            .collect();
        let g = voxelize(&PointCloud { points: points.clone(), colors: None }, &s).unwrap();
        for m in 0..30 {
            for n in 0..20 {
                for k in 0..70 {
                    let lo = [s.origin[0] + m as f64 * 20.0, s.origin[1] + n as f64 * 20.0, k as f64 * 20.0];
                    let expect = points.iter().any(|p| {
                        (0..3).all(|a| p[a] >= lo[a] && p[a] < lo[a] + 20.0)
                    });
                    assert_eq!(g.get([m, n, k]), expect, "voxel {m},{n},{k}");
                }
            }
        }
    }

    #[test]
    fn single_voxel_heightmap() {
        let mut g = VoxelGrid::new(spec(10)).unwrap();
        g.set([3, 4, 7]);
        let map = topdown_heightmap(&g);
        for m in 0..10 {
            for n in 0..10 {
                assert_eq!(map.get(m, n), if (m, n) == (3, 4) { 7 } else { 0 });
            }
        }
    }

    #[test]
    fn voxelizing_cell_centers_reproduces_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = spec(16);
        let mut g = VoxelGrid::new(s).unwrap();
        for _ in 0..300 {
            g.set([rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..16)]);
        }
        let cloud = PointCloud { points: g.occupied().map(|i| s.voxel_center(i)).collect(), colors: None };
        assert_eq!(voxelize(&cloud, &s).unwrap(), g);
    }

    #[test]
    fn grid_from_rig_covers_footprint() {
        let k = CameraIntrinsics::new(200.0, 200.0, 128.0, 96.0, 256, 192).unwrap();
        let pose = Pose::look_at(Vector3::new(0.0, 0.0, 3000.0), Vector3::new(0.0, 0.0, 0.0), Vector3::y()).unwrap();
        let s = GridSpec::from_rig(&[CameraModel::new(0, k, pose)], 1000.0, 2600.0, 6000.0, 20.0).unwrap();
        assert_eq!(s.dims[2], 130);
        // 3 m nadir: footprint half-width 128/200*3000 = 1920 mm, plus margin.
        assert!(s.origin[0] <= -2900.0 && s.origin[0] > -3000.0);
        assert!(s.index_of(&Vector3::new(0.0, 0.0, 100.0)).is_some());
    }
}
