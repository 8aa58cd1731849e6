//! Synthetic multi-camera RGB-D scenes with exact ground truth.
//!
//! People are capsules (a vertical cylinder of radius `r` up to `h - r`
//! topped by a hemisphere) moving at constant speed around a closed
//! waypoint loop. Depth is rendered by casting one ray per pixel against the
//! capsules, optional static boxes, and the floor.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{marker_corners_world, MarkerObservation};
use crate::fusion::DepthFrame;
use crate::geometry::{CameraId, CameraIntrinsics, CameraModel, MarkerId, Pose};
use crate::track::{TrackSet, TrackState, TrackStatus, Tracklet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scene spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),
    #[error("frame {frame} out of range (scene has {count} frames)")]
    FrameOutOfRange { frame: u64, count: u64 },
}

fn default_fps() -> f64 {
    15.0
}
fn default_radius() -> f64 {
    160.0
}
fn default_side() -> f64 {
    150.0
}
fn default_true() -> bool {
    true
}
fn default_ground_color() -> [u8; 3] {
    [128, 128, 128]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorSpec {
    #[serde(default = "default_radius")]
    pub radius_mm: f64,
    pub height_mm: f64,
    pub color: [u8; 3],
    pub waypoints: Vec<[f64; 2]>,
    pub speed_mm_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub id: MarkerId,
    #[serde(default = "default_side")]
    pub side_mm: f64,
    /// Marker center on the floor.
    pub center_xy: [f64; 2],
    #[serde(default)]
    pub yaw_rad: f64,
}

impl MarkerSpec {
    pub fn corners(&self) -> [Vector3<f64>; 4] {
        marker_corners_world(self.side_mm, self.center_xy, self.yaw_rad)
    }
}

/// Static axis-aligned box, e.g. a low object meant to be rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min_mm: [f64; 3],
    pub max_mm: [f64; 3],
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min_xy: [f64; 2],
    pub max_xy: [f64; 2],
}

impl Default for SceneBounds {
    fn default() -> Self {
        Self { min_xy: [-50_000.0; 2], max_xy: [50_000.0; 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub duration_s: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default)]
    pub actors: Vec<ActorSpec>,
    pub cameras: Vec<CameraModel>,
    #[serde(default)]
    pub markers: Vec<MarkerSpec>,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    #[serde(default)]
    pub bounds: SceneBounds,
    #[serde(default = "default_true")]
    pub ground_plane: bool,
    #[serde(default = "default_ground_color")]
    pub ground_color: [u8; 3],
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn frame_count(&self) -> u64 {
        (self.duration_s * self.fps).round().max(0.0) as u64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut errs = Vec::new();
        if !(self.fps > 0.0) {
            errs.push(format!("fps must be positive (got {})", self.fps));
        }
        if !(self.duration_s >= 0.0) {
            errs.push(format!("duration_s must be non-negative (got {})", self.duration_s));
        }
        let b = &self.bounds;
        if !(b.min_xy[0] < b.max_xy[0] && b.min_xy[1] < b.max_xy[1]) {
            errs.push("bounds must have min < max".into());
        }
        let inside = |p: &[f64; 2]| p[0] >= b.min_xy[0] && p[0] <= b.max_xy[0] && p[1] >= b.min_xy[1] && p[1] <= b.max_xy[1];
        for (i, a) in self.actors.iter().enumerate() {
            if !(a.height_mm > 0.0) {
                errs.push(format!("actors[{i}].height_mm must be positive"));
            }
            if !(a.radius_mm > 0.0 && a.radius_mm <= a.height_mm) {
                errs.push(format!("actors[{i}].radius_mm must be in (0, height_mm]"));
            }
            if !(0.0..=1500.0).contains(&a.speed_mm_s) {
                errs.push(format!("actors[{i}].speed_mm_s must be in [0, 1500]"));
            }
            if a.waypoints.is_empty() {
                errs.push(format!("actors[{i}].waypoints is empty"));
            }
            for (j, w) in a.waypoints.iter().enumerate() {
                if !inside(w) {
                    errs.push(format!("actors[{i}].waypoints[{j}] outside bounds"));
                }
            }
        }
        let mut ids: Vec<_> = self.cameras.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            errs.push("camera ids must be unique".into());
        }
        for c in &self.cameras {
            if let Err(e) = c.intrinsics.validate() {
                errs.push(format!("camera {}: {e}", c.id));
            }
        }
        let mut mids: Vec<_> = self.markers.iter().map(|m| m.id).collect();
        mids.sort_unstable();
        if mids.windows(2).any(|w| w[0] == w[1]) {
            errs.push("marker ids must be unique".into());
        }
        for m in &self.markers {
            if !(m.side_mm > 0.0) {
                errs.push(format!("marker {} side_mm must be positive", m.id));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SimError::InvalidSpec(errs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorPose {
    pub xy: [f64; 2],
    pub height_mm: f64,
    pub radius_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    /// `poses[frame][actor]`.
    pub poses: Vec<Vec<ActorPose>>,
    /// One confirmed track per actor (id = actor index + 1) spanning all frames.
    pub ground_truth: TrackSet,
}

impl Scene {
    pub fn frame_count(&self) -> u64 {
        self.poses.len() as u64
    }
}

/// Position after travelling `s` mm around the closed loop through `wps`.
fn position_on_loop(wps: &[[f64; 2]], s: f64) -> [f64; 2] {
    if wps.len() == 1 {
        return wps[0];
    }
    let segs: Vec<(Vector2<f64>, Vector2<f64>, f64)> = (0..wps.len())
        .map(|i| {
            let a = Vector2::from(wps[i]);
            let b = Vector2::from(wps[(i + 1) % wps.len()]);
            (a, b, (b - a).norm())
        })
        .collect();
    let perimeter: f64 = segs.iter().map(|s| s.2).sum();
    if perimeter <= 0.0 {
        return wps[0];
    }
    let mut rem = s.rem_euclid(perimeter);
    for (a, b, len) in &segs {
        if rem <= *len {
            let p = if *len > 0.0 { a + (b - a) * (rem / len) } else { *a };
            return [p.x, p.y];
        }
        rem -= len;
    }
    wps[0]
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SimError> {
    spec.validate()?;
    let n = spec.frame_count();
    let poses: Vec<Vec<ActorPose>> = (0..n)
        .map(|f| {
            let t = f as f64 / spec.fps;
            spec.actors
                .iter()
                .map(|a| ActorPose {
                    xy: position_on_loop(&a.waypoints, a.speed_mm_s * t),
                    height_mm: a.height_mm,
                    radius_mm: a.radius_mm,
                })
                .collect()
        })
        .collect();
    let mut gt = TrackSet::new();
    for (i, _) in spec.actors.iter().enumerate() {
        let id = gt.allocate_id();
        debug_assert_eq!(id, i as u64 + 1);
        let states = poses
            .iter()
            .enumerate()
            .map(|(f, frame)| TrackState {
                frame_index: f as u64,
                world_xy: frame[i].xy,
                height_mm: frame[i].height_mm,
                score: 1.0,
                histogram: None,
                matched: true,
            })
            .collect::<Vec<_>>();
        gt.tracklets.push(Tracklet {
            id,
            hits: states.len() as u32,
            states,
            status: TrackStatus::Confirmed,
            misses: 0,
            confirmed_at: Some(0),
        });
    }
    gt.frame_cursor = n.checked_sub(1);
    Ok(Scene { spec: spec.clone(), poses, ground_truth: gt })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surface {
    Ground,
    Actor(usize),
    Box(usize),
}

/// Smallest positive root of `a t² + b t + c = 0`, if any.
fn first_root(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    if a.abs() < 1e-18 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let q = if b >= 0.0 { -0.5 * (b + sq) } else { -0.5 * (b - sq) };
    let (mut t0, mut t1) = (q / a, if q != 0.0 { c / q } else { q / a });
    if t0 > t1 {
        std::mem::swap(&mut t0, &mut t1);
    }
    Some((t0, t1))
}

/// First intersection parameter of `origin + t·dir` (t > 0) with a capsule.
pub fn ray_capsule(origin: &Vector3<f64>, dir: &Vector3<f64>, pose: &ActorPose) -> Option<f64> {
    let r = pose.radius_mm;
    let top = pose.height_mm - r;
    let ox = origin.x - pose.xy[0];
    let oy = origin.y - pose.xy[1];
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 1e-9 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    // side of the cylinder
    let a = dir.x * dir.x + dir.y * dir.y;
    let b = 2.0 * (ox * dir.x + oy * dir.y);
    let c = ox * ox + oy * oy - r * r;
    if let Some((t0, t1)) = first_root(a, b, c) {
        for t in [t0, t1] {
            let z = origin.z + t * dir.z;
            if t > 1e-9 && (0.0..=top).contains(&z) {
                consider(t);
                break;
            }
        }
    }
    // hemispherical cap (the lower half lies inside the cylinder)
    let oz = origin.z - top;
    let a = dir.norm_squared();
    let b = 2.0 * (ox * dir.x + oy * dir.y + oz * dir.z);
    let c = ox * ox + oy * oy + oz * oz - r * r;
    if let Some((t0, t1)) = first_root(a, b, c) {
        for t in [t0, t1] {
            if t > 1e-9 {
                consider(t);
                break;
            }
        }
    }
    best
}

fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, bx: &BoxSpec) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < bx.min_mm[a] || origin[a] > bx.max_mm[a] {
                return None;
            }
            continue;
        }
        let t0 = (bx.min_mm[a] - origin[a]) / dir[a];
        let t1 = (bx.max_mm[a] - origin[a]) / dir[a];
        t_near = t_near.max(t0.min(t1));
        t_far = t_far.min(t0.max(t1));
    }
    if t_near > t_far || t_far <= 1e-9 {
        return None;
    }
    Some(if t_near > 1e-9 { t_near } else { t_far })
}

/// Nearest surface along a world ray, as `(t, surface)`.
pub fn cast_ray(scene: &Scene, frame: usize, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Surface)> {
    let mut best: Option<(f64, Surface)> = None;
    let mut offer = |t: f64, s: Surface| {
        if best.is_none_or(|(b, _)| t < b) {
            best = Some((t, s));
        }
    };
    if scene.spec.ground_plane && dir.z < 0.0 && origin.z > 0.0 {
        offer(-origin.z / dir.z, Surface::Ground);
    }
    for (i, pose) in scene.poses[frame].iter().enumerate() {
        if let Some(t) = ray_capsule(origin, dir, pose) {
            offer(t, Surface::Actor(i));
        }
    }
    for (i, bx) in scene.spec.boxes.iter().enumerate() {
        if let Some(t) = ray_box(origin, dir, bx) {
            offer(t, Surface::Box(i));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub noise_sigma_mm: f64,
    pub with_color: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { noise_sigma_mm: 0.0, with_color: true }
    }
}

fn stream_seed(seed: u64, salt: u64, camera: u32, frame: u64) -> u64 {
    // splitmix-style mixing so neighbouring frames get unrelated streams
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((camera as u64) << 40) ^ frame;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders the z-depth (mm along the optical axis) seen by `camera`.
pub fn render_depth_frame(scene: &Scene, camera: &CameraModel, frame: u64, opts: &RenderOptions) -> Result<DepthFrame, SimError> {
    if frame >= scene.frame_count() {
        return Err(SimError::FrameOutOfRange { frame, count: scene.frame_count() });
    }
    let k = &camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let origin = camera.center();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scene.spec.seed, 1, camera.id, frame));
    let noise = (opts.noise_sigma_mm > 0.0).then(|| Normal::new(0.0, opts.noise_sigma_mm).expect("valid sigma"));
    let mut depth = Vec::with_capacity(w as usize * h as usize);
    let mut color = opts.with_color.then(|| Vec::with_capacity(w as usize * h as usize));
    for v in 0..h {
        for u in 0..w {
            let dir = camera.pixel_ray(&Vector2::new(u as f64, v as f64));
            let hit = cast_ray(scene, frame as usize, &origin, &dir);
            let (d, rgb) = match hit {
                Some((t, surface)) => {
                    let mut z = t;
                    if let Some(n) = &noise {
                        z += n.sample(&mut rng);
                    }
                    let rgb = match surface {
                        Surface::Ground => scene.spec.ground_color,
                        Surface::Actor(i) => scene.spec.actors[i].color,
                        Surface::Box(i) => scene.spec.boxes[i].color,
                    };
                    (z.round().clamp(1.0, u16::MAX as f64) as u16, rgb)
                }
                None => (0, [0, 0, 0]),
            };
            depth.push(d);
            if let Some(c) = color.as_mut() {
                c.push(rgb);
            }
        }
    }
    Ok(DepthFrame {
        camera_id: camera.id,
        frame_index: frame,
        timestamp_ms: frame as f64 * 1000.0 / scene.spec.fps,
        width: w,
        height: h,
        depth,
        color,
    })
}

/// Marker corner observations for every camera that sees them. A corner is
/// observed when it is in front of the camera, the marker faces the camera,
/// and the (noisy) pixel lies inside the image.
pub fn synth_marker_observations(scene: &Scene, noise_px: f64, seed: u64) -> Vec<MarkerObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 2, 0, 0));
    let noise = (noise_px > 0.0).then(|| Normal::new(0.0, noise_px).expect("valid sigma"));
    let mut out = Vec::new();
    for cam in &scene.spec.cameras {
        let center = cam.center();
        for m in &scene.spec.markers {
            // floor markers face +z
            if center.z <= 0.0 {
                continue;
            }
            for (ci, corner) in m.corners().iter().enumerate() {
                let Ok(mut px) = cam.project_point(corner) else { continue };
                if let Some(n) = &noise {
                    px.x += n.sample(&mut rng);
                    px.y += n.sample(&mut rng);
                }
                if cam.intrinsics.contains(&px) {
                    out.push(MarkerObservation { camera_id: cam.id, marker_id: m.id, corner_index: ci as u8, pixel: [px.x, px.y] });
                }
            }
        }
    }
    out
}

/// Room used by the built-in demo scenes, in mm: `x ∈ ±3000`, `y ∈ ±2500`.
pub const ROOM_HALF_EXTENT_MM: [f64; 2] = [3000.0, 2500.0];

/// Four cameras in the upper room corners, each aimed at the room center.
pub fn corner_rig(intrinsics: CameraIntrinsics, mount_height_mm: f64) -> Vec<CameraModel> {
    let [hx, hy] = ROOM_HALF_EXTENT_MM;
    let inset = 100.0;
    [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let eye = Vector3::new(s[0] * (hx - inset), s[1] * (hy - inset), mount_height_mm);
            let pose = Pose::look_at(eye, Vector3::new(0.0, 0.0, 0.0), Vector3::z()).expect("corner camera is not vertical");
            CameraModel::new(i as CameraId + 1, intrinsics, pose)
        })
        .collect()
}

/// Low-resolution depth intrinsics used by the demo scenes.
pub fn demo_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(200.0, 200.0, 127.5, 95.5, 256, 192).expect("valid intrinsics")
}

/// Six floor markers around the room center; marker 0 is at the origin.
pub fn demo_markers() -> Vec<MarkerSpec> {
    let spots = [([0.0, 0.0], 0.0), ([900.0, 300.0], 0.4), ([-800.0, 500.0], -0.6), ([400.0, -900.0], 1.2), ([-600.0, -500.0], 2.1), ([1200.0, -300.0], 0.8)];
    spots
        .iter()
        .enumerate()
        .map(|(i, (c, yaw))| MarkerSpec { id: i as MarkerId, side_mm: 150.0, center_xy: *c, yaw_rad: *yaw })
        .collect()
}

const ACTOR_COLORS: [[u8; 3]; 6] = [[220, 40, 40], [40, 180, 60], [40, 80, 220], [230, 200, 40], [180, 60, 200], [40, 200, 210]];

/// Up to six actors, each walking its own rectangular loop in a separate
/// zone of the room so that paths never come within 600 mm. Heights,
/// speeds and starting corners vary with `seed`.
pub fn zoned_scene_spec(actors: usize, duration_s: f64, seed: u64) -> SceneSpec {
    use rand::Rng;
    assert!(actors <= 6, "at most six zoned actors");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [[-1800.0, -1200.0], [0.0, -1200.0], [1800.0, -1200.0], [-1800.0, 1200.0], [0.0, 1200.0], [1800.0, 1200.0]];
    let actors = (0..actors)
        .map(|i| {
            let [cx, cy] = centers[i];
            let (hx, hy) = (600.0, 500.0);
            let mut waypoints = vec![[cx - hx, cy - hy], [cx + hx, cy - hy], [cx + hx, cy + hy], [cx - hx, cy + hy]];
            waypoints.rotate_left(rng.random_range(0..4));
            if rng.random_bool(0.5) {
                waypoints.reverse();
            }
            ActorSpec {
                radius_mm: 160.0,
                height_mm: rng.random_range(1500.0..=1900.0),
                color: ACTOR_COLORS[i],
                waypoints,
                speed_mm_s: rng.random_range(600.0..=1300.0),
            }
        })
        .collect();
    SceneSpec {
        duration_s,
        fps: 15.0,
        actors,
        cameras: corner_rig(demo_intrinsics(), 3000.0),
        markers: demo_markers(),
        boxes: vec![],
        bounds: SceneBounds { min_xy: ROOM_HALF_EXTENT_MM.map(|v| -v), max_xy: ROOM_HALF_EXTENT_MM },
        ground_plane: true,
        ground_color: default_ground_color(),
        seed,
    }
}

/// Two actors walking head-on along parallel lines through the room center,
/// passing each other at a lateral distance of 380–500 mm. Both walk at
/// the same speed so every pass happens at the center. Direction, offset,
/// speed and heights vary with `seed`.
pub fn crossing_scene_spec(duration_s: f64, seed: u64) -> SceneSpec {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let offset = rng.random_range(380.0..=500.0);
    let speed = rng.random_range(800.0..=1300.0);
    let half_len = 1800.0;
    let dir = Vector2::new(angle.cos(), angle.sin());
    let normal = Vector2::new(-dir.y, dir.x) * (offset / 2.0);
    let leg = |side: f64, flip: f64| {
        let a = normal * side - dir * half_len * flip;
        let b = normal * side + dir * half_len * flip;
        vec![[a.x, a.y], [b.x, b.y]]
    };
    let actor = |i: usize, waypoints: Vec<[f64; 2]>, height_mm: f64| ActorSpec {
        radius_mm: 160.0,
        height_mm,
        color: ACTOR_COLORS[i],
        waypoints,
        speed_mm_s: speed,
    };
    let h0 = rng.random_range(1500.0..=1900.0);
    let h1 = rng.random_range(1500.0..=1900.0);
    SceneSpec {
        duration_s,
        fps: 15.0,
        actors: vec![actor(0, leg(1.0, 1.0), h0), actor(2, leg(-1.0, -1.0), h1)],
        cameras: corner_rig(demo_intrinsics(), 3000.0),
        markers: demo_markers(),
        boxes: vec![],
        bounds: SceneBounds { min_xy: ROOM_HALF_EXTENT_MM.map(|v| -v), max_xy: ROOM_HALF_EXTENT_MM },
        ground_plane: true,
        ground_color: default_ground_color(),
        seed,
    }
}

/// Frames at which two actors are at a local minimum of their distance and
/// closer than `within_mm`.
pub fn close_passes(scene: &Scene, a: usize, b: usize, within_mm: f64) -> Vec<u64> {
    let d: Vec<f64> = scene
        .poses
        .iter()
        .map(|p| (Vector2::from(p[a].xy) - Vector2::from(p[b].xy)).norm())
        .collect();
    (0..d.len())
        .filter(|&i| {
            d[i] <= within_mm && (i == 0 || d[i] < d[i - 1]) && (i + 1 == d.len() || d[i] <= d[i + 1])
        })
        .map(|i| i as u64)
        .collect()
}

/// A damaged copy of `truth` for exercising corrections: `swaps` identity
/// swaps (two tracklets exchange their tails at a random frame) and
/// `false_tracklets` short spurious tracklets kept more than 1.5 m from
/// every true position.
pub fn corrupt_tracks(truth: &TrackSet, bounds: &SceneBounds, swaps: usize, false_tracklets: usize, seed: u64) -> TrackSet {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 3, 0, 0));
    let mut set = truth.clone();
    let n = set.tracklets.len();
    if n >= 2 {
        for _ in 0..swaps {
            let a = rng.random_range(0..n);
            let b = (a + rng.random_range(1..n)) % n;
            let (ta, tb) = (&set.tracklets[a], &set.tracklets[b]);
            let lo = ta.first_frame().unwrap_or(0).max(tb.first_frame().unwrap_or(0)) + 1;
            let hi = ta.last_frame().unwrap_or(0).min(tb.last_frame().unwrap_or(0));
            if lo > hi {
                continue;
            }
            let at = rng.random_range(lo..=hi);
            let ca = set.tracklets[a].states.partition_point(|s| s.frame_index < at);
            let cb = set.tracklets[b].states.partition_point(|s| s.frame_index < at);
            let tail_a = set.tracklets[a].states.split_off(ca);
            let tail_b = set.tracklets[b].states.split_off(cb);
            set.tracklets[a].states.extend(tail_b);
            set.tracklets[b].states.extend(tail_a);
        }
    }
    let frames = truth.frame_cursor.map_or(0, |c| c + 1);
    let near_truth = |f: u64, p: [f64; 2]| {
        truth.tracklets.iter().filter_map(|t| t.state_at(f)).any(|s| (Vector2::from(s.world_xy) - Vector2::from(p)).norm() < 1500.0)
    };
    let mut added = 0;
    let mut attempts = 0;
    while added < false_tracklets && frames > 0 && attempts < 10_000 {
        attempts += 1;
        let len = rng.random_range(10..=40).min(frames);
        let start = rng.random_range(0..=frames - len);
        let p = [rng.random_range(bounds.min_xy[0]..bounds.max_xy[0]), rng.random_range(bounds.min_xy[1]..bounds.max_xy[1])];
        if (start..start + len).any(|f| near_truth(f, p)) {
            continue;
        }
        let id = set.allocate_id();
        let states = (start..start + len)
            .map(|f| TrackState { frame_index: f, world_xy: p, height_mm: 1200.0, score: 1.0, histogram: None, matched: true })
            .collect::<Vec<_>>();
        set.tracklets.push(Tracklet { id, hits: len as u32, states, status: TrackStatus::Terminated, misses: 0, confirmed_at: Some(start) });
        added += 1;
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExportOptions {
    pub noise_sigma_mm: f64,
    pub with_color: bool,
    pub marker_noise_px: f64,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self { noise_sigma_mm: 0.0, with_color: true, marker_noise_px: 0.0 }
    }
}

/// Writes a rendered scene: `scene.json`, `calib.json`, `gt.jsonl`,
/// `observations.jsonl` and `depth/` (meta plus per-camera frames).
pub fn export_scene(scene: &Scene, out: &std::path::Path, opts: &ExportOptions) -> Result<(), crate::io::IoError> {
    use crate::io;
    io::write_json(&out.join("scene.json"), &scene.spec)?;
    io::write_calibration(&out.join("calib.json"), &scene.spec.cameras)?;
    io::write_jsonl(&out.join("gt.jsonl"), &scene.ground_truth.to_records())?;
    io::write_jsonl(&out.join("observations.jsonl"), &synth_marker_observations(scene, opts.marker_noise_px, scene.spec.seed))?;
    let depth = out.join("depth");
    let meta = io::StreamMeta {
        fps: scene.spec.fps,
        frames: scene.frame_count(),
        cameras: scene
            .spec
            .cameras
            .iter()
            .map(|c| io::StreamCamera { id: c.id, width: c.intrinsics.width, height: c.intrinsics.height })
            .collect(),
    };
    io::write_json(&depth.join("meta.json"), &meta)?;
    std::fs::create_dir_all(&depth).map_err(|e| io::IoError::Io { path: depth.clone(), source: e })?;
    let render = RenderOptions { noise_sigma_mm: opts.noise_sigma_mm, with_color: opts.with_color };
    for f in 0..scene.frame_count() {
        for cam in &scene.spec.cameras {
            let frame = render_depth_frame(scene, cam, f, &render).expect("frame index in range");
            io::write_depth_frame(&depth, &frame)?;
        }
    }
    Ok(())
}
