//! Camera-view projection of top-down tracks.
//!
//! Each tracked person becomes a 1000 mm × 1000 mm × h box standing on the
//! floor; its tightest enclosing image rectangle is the per-camera label.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::TopDownMap;
use crate::geometry::{CameraId, CameraModel};
use crate::track::{TrackId, TrackSet};

pub const PERSON_FOOTPRINT_MM: f64 = 1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectError {
    #[error("top-down region holds no occupied cells")]
    EmptyRegion,
    #[error("top-down region lies outside the map")]
    RegionOutsideMap,
    #[error("person height must be positive, got {0}")]
    NonPositiveHeight(f64),
}

/// Axis-aligned rectangle on the ground plane, in world millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopDownRegion {
    pub min_xy: [f64; 2],
    pub max_xy: [f64; 2],
}

impl TopDownRegion {
    pub fn around(center: [f64; 2], side_mm: f64) -> Self {
        let h = side_mm / 2.0;
        Self { min_xy: [center[0] - h, center[1] - h], max_xy: [center[0] + h, center[1] + h] }
    }
}

/// Person height from the highest heightmap cell inside `region`; each unit
/// of cell value is one cell edge (20 mm by default).
pub fn estimate_height(map: &TopDownMap, region: &TopDownRegion) -> Result<f64, ProjectError> {
    let g = &map.ground;
    let lo = g.world_to_cell(region.min_xy[0], region.min_xy[1]);
    let hi = g.world_to_cell(region.max_xy[0], region.max_xy[1]);
    let m0 = lo.x.floor().max(0.0);
    let n0 = lo.y.floor().max(0.0);
    let m1 = (hi.x.ceil() - 1.0).min(map.nx as f64 - 1.0);
    let n1 = (hi.y.ceil() - 1.0).min(map.ny as f64 - 1.0);
    if m1 < m0 || n1 < n0 {
        return Err(ProjectError::RegionOutsideMap);
    }
    let mut best = 0u16;
    for m in m0 as usize..=m1 as usize {
        for n in n0 as usize..=n1 as usize {
            best = best.max(map.get(m, n));
        }
    }
    if best == 0 {
        return Err(ProjectError::EmptyRegion);
    }
    Ok(best as f64 * map.cell_mm())
}

/// Eight corners of the floor-standing person box, bottom face first.
pub fn person_cube(ground_xy: [f64; 2], h: f64) -> Result<[Vector3<f64>; 8], ProjectError> {
    if !(h > 0.0) {
        return Err(ProjectError::NonPositiveHeight(h));
    }
    let s = PERSON_FOOTPRINT_MM / 2.0;
    let [x, y] = ground_xy;
    let mut corners = [Vector3::zeros(); 8];
    for (i, c) in corners.iter_mut().enumerate() {
        let dx = if i & 1 == 0 { -s } else { s };
        let dy = if i & 2 == 0 { -s } else { s };
        let z = if i & 4 == 0 { 0.0 } else { h };
        *c = Vector3::new(x + dx, y + dy, z);
    }
    Ok(corners)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox2D {
    pub camera_id: CameraId,
    pub frame_index: u64,
    pub track_id: TrackId,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    /// The unclipped rectangle extended past the image.
    pub clipped: bool,
}

/// Raw (unclipped) envelope of the corners in front of the camera.
pub fn corner_envelope(corners: &[Vector3<f64>], camera: &CameraModel) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for c in corners {
        if let Ok(p) = camera.project_point(c) {
            lo = lo.inf(&p);
            hi = hi.sup(&p);
            any = true;
        }
    }
    any.then_some((lo, hi))
}

/// Tightest image rectangle around the projected corners, clipped to the
/// image. Only corners in front of the camera contribute; `None` when no
/// corner is in front or the clipped rectangle is empty.
pub fn project_person_box(corners: &[Vector3<f64>; 8], camera: &CameraModel, frame_index: u64, track_id: TrackId) -> Option<BoundingBox2D> {
    let (lo, hi) = corner_envelope(corners, camera)?;
    let k = &camera.intrinsics;
    let (w, h) = (k.width as f64, k.height as f64);
    let left = lo.x.max(0.0);
    let top = lo.y.max(0.0);
    let right = hi.x.min(w);
    let bottom = hi.y.min(h);
    if !(right > left && bottom > top) {
        return None;
    }
    let clipped = lo.x < 0.0 || lo.y < 0.0 || hi.x > w || hi.y > h;
    Some(BoundingBox2D {
        camera_id: camera.id,
        frame_index,
        track_id,
        left,
        top,
        width: right - left,
        height: bottom - top,
        clipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub frame: u64,
    pub camera: CameraId,
    pub track_id: TrackId,
    pub bbox: BoundingBox2D,
    pub conf: f64,
}

/// Per-camera labels for every state of every reportable tracklet, sorted by
/// `(frame, camera, track_id)`.
pub fn generate_label_records(tracks: &TrackSet, rig: &[CameraModel]) -> Vec<LabelRecord> {
    let mut out = Vec::new();
    for t in tracks.tracklets.iter().filter(|t| t.is_reportable()) {
        for s in &t.states {
            let Ok(cube) = person_cube(s.world_xy, s.height_mm) else { continue };
            for cam in rig {
                if let Some(bbox) = project_person_box(&cube, cam, s.frame_index, t.id) {
                    out.push(LabelRecord { frame: s.frame_index, camera: cam.id, track_id: t.id, bbox, conf: s.score });
                }
            }
        }
    }
    out.sort_by_key(|r| (r.frame, r.camera, r.track_id));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, GroundGrid, Pose};

    fn map() -> TopDownMap {
        TopDownMap::zeros(50, 50, GroundGrid { origin_x: 0.0, origin_y: 0.0, cell_mm: 20.0 })
    }

    #[test]
    fn height_from_region_max() {
        let mut m = map();
        m.set(10, 10, 85);
        m.set(11, 10, 60);
        let r = TopDownRegion::around([210.0, 210.0], 100.0);
        assert_eq!(estimate_height(&m, &r), Ok(1700.0));
        let empty = TopDownRegion::around([700.0, 700.0], 100.0);
        assert_eq!(estimate_height(&m, &empty), Err(ProjectError::EmptyRegion));
        let outside = TopDownRegion::around([-5000.0, 0.0], 100.0);
        assert_eq!(estimate_height(&m, &outside), Err(ProjectError::RegionOutsideMap));
    }

    #[test]
    fn cube_corners() {
        let c = person_cube([0.0, 0.0], 1700.0).unwrap();
        for p in &c {
            assert_eq!(p.x.abs(), 500.0);
            assert_eq!(p.y.abs(), 500.0);
            assert!(p.z == 0.0 || p.z == 1700.0);
        }
        let distinct: std::collections::HashSet<_> = c.iter().map(|p| (p.x as i64, p.y as i64, p.z as i64)).collect();
        assert_eq!(distinct.len(), 8);
        assert_eq!(person_cube([0.0, 0.0], 0.0), Err(ProjectError::NonPositiveHeight(0.0)));
        let shifted = person_cube([300.0, -40.0], 1700.0).unwrap();
        for (a, b) in c.iter().zip(&shifted) {
            assert_eq!(b - a, Vector3::new(300.0, -40.0, 0.0));
        }
    }

    fn nadir_camera() -> CameraModel {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let pose = Pose::look_at(Vector3::new(0.0, 0.0, 5000.0), Vector3::zeros(), Vector3::y()).unwrap();
        CameraModel::new(4, k, pose)
    }

    #[test]
    fn nadir_box_is_symmetric_about_principal_point() {
        let cam = nadir_camera();
        let b = project_person_box(&person_cube([0.0, 0.0], 1700.0).unwrap(), &cam, 0, 1).unwrap();
        assert!((b.left + b.width / 2.0 - 320.0).abs() < 1e-9);
        assert!((b.top + b.height / 2.0 - 240.0).abs() < 1e-9);
        assert!(!b.clipped);
        // top face at 3300 mm from the camera: half-width 500 * 500 / 3300
        assert!((b.width - 2.0 * 500.0 * 500.0 / 3300.0).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_invisible() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let cam = CameraModel::new(0, k, Pose::look_at(Vector3::new(0.0, 0.0, 1000.0), Vector3::new(0.0, 0.0, 3000.0), Vector3::y()).unwrap());
        assert!(project_person_box(&person_cube([0.0, 0.0], 900.0).unwrap(), &cam, 0, 1).is_none());
    }

    #[test]
    fn clipped_box_stays_inside_image() {
        let cam = nadir_camera();
        let b = project_person_box(&person_cube([3000.0, 0.0], 1700.0).unwrap(), &cam, 0, 1).unwrap();
        assert!(b.clipped);
        assert!(b.left + b.width <= 640.0 + 1e-9);
        assert!(project_person_box(&person_cube([30000.0, 0.0], 1700.0).unwrap(), &cam, 0, 1).is_none());
    }
}
