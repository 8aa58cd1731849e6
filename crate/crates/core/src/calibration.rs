//! Joint extrinsic calibration from fiducial-marker corner observations.
//!
//! Cameras and markers form a bipartite graph. Poses are initialized along a
//! breadth-first tree from the anchor marker (planar PnP per edge) and then
//! refined with Levenberg–Marquardt over all camera poses and the corners of
//! every non-anchor marker. The anchor's corners are pinned on `z = 0`, which
//! fixes the world frame and the metric scale.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraId, CameraIntrinsics, CameraModel, MarkerId, Pose};

pub const DEFAULT_MARKER_SIDE_MM: f64 = 150.0;
pub const DEFAULT_HUBER_PX: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("no observations")]
    EmptyInput,
    #[error("unknown or unsolved entity: {0}")]
    MissingEntity(String),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("calibration graph is disconnected: {components:?}")]
    DisconnectedGraph { components: Vec<Vec<String>> },
    #[error("{entity} has no fully observed marker reachable from the anchor")]
    InsufficientCorners { entity: String },
    #[error("solver diverged (cost {cost:e})")]
    DivergedSolve { cost: f64 },
    #[error("normal equations are singular")]
    SingularNormalEquations,
}

/// One detected marker corner in one camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "ObservationRepr", into = "ObservationRepr")]
pub struct MarkerObservation {
    pub camera_id: CameraId,
    pub marker_id: MarkerId,
    pub corner_index: u8,
    pub pixel: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct ObservationRepr {
    camera: CameraId,
    marker: MarkerId,
    corner: u8,
    u: f64,
    v: f64,
}

impl From<ObservationRepr> for MarkerObservation {
    fn from(r: ObservationRepr) -> Self {
        Self { camera_id: r.camera, marker_id: r.marker, corner_index: r.corner, pixel: [r.u, r.v] }
    }
}

impl From<MarkerObservation> for ObservationRepr {
    fn from(o: MarkerObservation) -> Self {
        Self { camera: o.camera_id, marker: o.marker_id, corner: o.corner_index, u: o.pixel[0], v: o.pixel[1] }
    }
}

/// Corners of a square marker in its own frame, counter-clockwise from the
/// top-left when seen from above: `(-s/2, +s/2)`, `(+s/2, +s/2)`,
/// `(+s/2, -s/2)`, `(-s/2, -s/2)`.
pub fn marker_corners_local(side_mm: f64) -> [Vector3<f64>; 4] {
    let h = side_mm / 2.0;
    [Vector3::new(-h, h, 0.0), Vector3::new(h, h, 0.0), Vector3::new(h, -h, 0.0), Vector3::new(-h, -h, 0.0)]
}

/// World corners of a floor marker centered at `center_xy`, rotated by `yaw`
/// about +Z.
pub fn marker_corners_world(side_mm: f64, center_xy: [f64; 2], yaw_rad: f64) -> [Vector3<f64>; 4] {
    let pose = Pose::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw_rad), Vector3::new(center_xy[0], center_xy[1], 0.0));
    marker_corners_local(side_mm).map(|c| pose.transform(&c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Camera(CameraId),
    Marker(MarkerId),
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Camera(id) => write!(f, "camera {id}"),
            Node::Marker(id) => write!(f, "marker {id}"),
        }
    }
}

/// Corner pixels of one marker in one camera; `None` where unobserved.
pub type Edge = [Option<Vector2<f64>>; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationGraph {
    pub cameras: BTreeMap<CameraId, CameraIntrinsics>,
    /// Marker side lengths in mm.
    pub markers: BTreeMap<MarkerId, f64>,
    pub anchor: MarkerId,
    pub edges: BTreeMap<(CameraId, MarkerId), Edge>,
}

impl CalibrationGraph {
    /// Builds the graph, registering every observed marker with `side_mm`.
    /// A repeated (camera, marker, corner) keeps the last observation.
    pub fn new(
        cameras: BTreeMap<CameraId, CameraIntrinsics>,
        observations: &[MarkerObservation],
        anchor: MarkerId,
        side_mm: f64,
    ) -> Result<Self, CalibrationError> {
        if observations.is_empty() {
            return Err(CalibrationError::EmptyInput);
        }
        let mut markers = BTreeMap::new();
        let mut edges: BTreeMap<(CameraId, MarkerId), Edge> = BTreeMap::new();
        for o in observations {
            let k = cameras.get(&o.camera_id).ok_or_else(|| CalibrationError::MissingEntity(Node::Camera(o.camera_id).to_string()))?;
            if o.corner_index > 3 {
                return Err(CalibrationError::InvalidObservation(format!("corner index {} > 3", o.corner_index)));
            }
            let px = Vector2::from(o.pixel);
            if !k.contains(&px) {
                return Err(CalibrationError::InvalidObservation(format!(
                    "pixel ({}, {}) outside camera {} image",
                    px.x, px.y, o.camera_id
                )));
            }
            markers.insert(o.marker_id, side_mm);
            edges.entry((o.camera_id, o.marker_id)).or_insert([None; 4])[o.corner_index as usize] = Some(px);
        }
        if !markers.contains_key(&anchor) {
            return Err(CalibrationError::MissingEntity(Node::Marker(anchor).to_string()));
        }
        Ok(Self { cameras, markers, anchor, edges })
    }

    pub fn observations(&self) -> Vec<MarkerObservation> {
        let mut out = Vec::new();
        for (&(c, m), edge) in &self.edges {
            for (i, p) in edge.iter().enumerate() {
                if let Some(p) = p {
                    out.push(MarkerObservation { camera_id: c, marker_id: m, corner_index: i as u8, pixel: [p.x, p.y] });
                }
            }
        }
        out
    }

    /// Connected components over cameras and markers, each sorted.
    pub fn components(&self) -> Vec<Vec<Node>> {
        let mut adj: BTreeMap<Node, Vec<Node>> = BTreeMap::new();
        for &c in self.cameras.keys() {
            adj.entry(Node::Camera(c)).or_default();
        }
        for &m in self.markers.keys() {
            adj.entry(Node::Marker(m)).or_default();
        }
        for &(c, m) in self.edges.keys() {
            adj.get_mut(&Node::Camera(c)).unwrap().push(Node::Marker(m));
            adj.get_mut(&Node::Marker(m)).unwrap().push(Node::Camera(c));
        }
        let mut seen = BTreeSet::new();
        let mut comps = Vec::new();
        for &start in adj.keys() {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(n) = queue.pop_front() {
                for &next in &adj[&n] {
                    if seen.insert(next) {
                        comp.push(next);
                        queue.push_back(next);
                    }
                }
            }
            comp.sort();
            comps.push(comp);
        }
        comps
    }

    fn full_edge(&self, c: CameraId, m: MarkerId) -> Option<[Vector2<f64>; 4]> {
        let e = self.edges.get(&(c, m))?;
        Some([e[0]?, e[1]?, e[2]?, e[3]?])
    }

    pub fn observation_count(&self) -> usize {
        self.edges.values().map(|e| e.iter().flatten().count()).sum()
    }
}

/// Starting point for the solver: world→camera poses and world marker corners.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialEstimate {
    pub poses: BTreeMap<CameraId, Pose>,
    pub marker_corners: BTreeMap<MarkerId, [Vector3<f64>; 4]>,
}

/// Marker→camera pose from the four corners of one marker via the planar
/// homography between the marker plane and normalized image coordinates.
pub fn planar_pnp(k: &CameraIntrinsics, side_mm: f64, pixels: &[Vector2<f64>; 4]) -> Option<Pose> {
    let a = side_mm / 2.0;
    let local = marker_corners_local(2.0);
    // 8x8 DLT with h33 = 1 on unit-scaled marker coordinates
    let mut m = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = (local[i].x, local[i].y);
        let u = (pixels[i].x - k.cx) / k.fx;
        let v = (pixels[i].y - k.cy) / k.fy;
        let r0 = 2 * i;
        let r1 = 2 * i + 1;
        m.row_mut(r0).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        m.row_mut(r1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r0] = u;
        b[r1] = v;
    }
    let h = m.lu().solve(&b)?;
    let hm = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    let (h1, h2, h3) = (hm.column(0).into_owned(), hm.column(1).into_owned(), hm.column(2).into_owned());
    let mut mu = (h1.norm() + h2.norm()) / (2.0 * a);
    if h3.z < 0.0 {
        mu = -mu;
    }
    if mu == 0.0 || !mu.is_finite() {
        return None;
    }
    let r1 = h1 / (mu * a);
    let r2 = h2 / (mu * a);
    let t = h3 / mu;
    let r = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = UnitQuaternion::from_matrix(&(u * d * v_t));
    Some(Pose::new(rot, t))
}

fn project(k: &CameraIntrinsics, pose: &Pose, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    let pc = pose.transform(p);
    (pc.z > 1e-6).then(|| Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
}

fn perturb(pose: &Pose, d: &SVector<f64, 6>) -> Pose {
    Pose::new(UnitQuaternion::from_scaled_axis(Vector3::new(d[0], d[1], d[2])) * pose.rotation, pose.translation + Vector3::new(d[3], d[4], d[5]))
}

/// Small damped Gauss–Newton over a 6-DoF pose with a central-difference
/// Jacobian. `residuals` returns `None` for infeasible poses. Used only by
/// the initializer, where problems have a few dozen residuals.
fn refine_pose(pose: Pose, residuals: impl Fn(&Pose) -> Option<DVector<f64>>) -> Option<(Pose, f64)> {
    let mut pose = pose;
    let mut r = residuals(&pose)?;
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..50 {
        let mut jac = DMatrix::zeros(r.len(), 6);
        for j in 0..6 {
            let h = if j < 3 { 1e-6 } else { 1e-3 };
            let mut d = SVector::<f64, 6>::zeros();
            d[j] = h;
            let (Some(fp), Some(fm)) = (residuals(&perturb(&pose, &d)), residuals(&perturb(&pose, &-d))) else {
                return Some((pose, cost));
            };
            jac.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        let a = jac.tr_mul(&jac);
        let g = jac.tr_mul(&r);
        let mut improved = false;
        while lambda < 1e8 {
            let mut damped = a.clone();
            for i in 0..6 {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-9);
            }
            if let Some(step) = damped.cholesky().map(|ch| -ch.solve(&g)) {
                let trial = perturb(&pose, &SVector::<f64, 6>::from_iterator(step.iter().copied()));
                if let Some(tr) = residuals(&trial) {
                    let tc = tr.norm_squared();
                    if tc < cost {
                        improved = (cost - tc) > 1e-12 * cost;
                        pose = trial;
                        r = tr;
                        cost = tc;
                        lambda = (lambda / 10.0).max(1e-12);
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Some((pose, cost))
}

/// Both solutions of the planar pose ambiguity for one fully observed
/// marker, each refined on its four corners. The second candidate mirrors
/// the marker normal about the line of sight.
pub fn planar_pnp_candidates(k: &CameraIntrinsics, side_mm: f64, pixels: &[Vector2<f64>; 4]) -> Vec<Pose> {
    let Some(first) = planar_pnp(k, side_mm, pixels) else { return vec![] };
    let local = marker_corners_local(side_mm);
    let residuals = |p: &Pose| -> Option<DVector<f64>> {
        let mut r = DVector::zeros(8);
        for i in 0..4 {
            let q = project(k, p, &local[i])? - pixels[i];
            r[2 * i] = q.x;
            r[2 * i + 1] = q.y;
        }
        Some(r)
    };
    let mut seeds = vec![first];
    let n = first.rotation * Vector3::z();
    let v = first.translation.normalize();
    let mirrored = 2.0 * n.dot(&v) * v - n;
    if let Some(q) = UnitQuaternion::rotation_between(&n, &mirrored) {
        seeds.push(Pose::new(q * first.rotation, first.translation));
    }
    seeds.into_iter().filter_map(|s| refine_pose(s, residuals)).map(|(p, _)| p).collect()
}

/// Squared reprojection error of every observed corner in `pts` for one
/// camera pose; `None` if a corner lies behind the camera.
fn edge_residuals(k: &CameraIntrinsics, cam: &Pose, edge: &Edge, pts: &[Vector3<f64>; 4], out: &mut Vec<f64>) -> Option<()> {
    for (obs, p) in edge.iter().zip(pts) {
        if let Some(obs) = obs {
            let q = project(k, cam, p)? - obs;
            out.extend([q.x, q.y]);
        }
    }
    Some(())
}

struct InitState<'a> {
    graph: &'a CalibrationGraph,
    poses: BTreeMap<CameraId, Pose>,
    /// world←marker poses of placed markers
    markers: BTreeMap<MarkerId, Pose>,
}

impl InitState<'_> {
    fn corners(&self, m: MarkerId, world_from_marker: &Pose) -> [Vector3<f64>; 4] {
        marker_corners_local(self.graph.markers[&m]).map(|c| world_from_marker.transform(&c))
    }

    fn camera_residuals(&self, c: CameraId, pose: &Pose) -> Option<DVector<f64>> {
        let k = &self.graph.cameras[&c];
        let mut r = Vec::new();
        for (m, wm) in &self.markers {
            if let Some(e) = self.graph.edges.get(&(c, *m)) {
                edge_residuals(k, pose, e, &self.corners(*m, wm), &mut r)?;
            }
        }
        Some(DVector::from_vec(r))
    }

    fn marker_residuals(&self, m: MarkerId, world_from_marker: &Pose) -> Option<DVector<f64>> {
        let pts = self.corners(m, world_from_marker);
        let mut r = Vec::new();
        for (c, pose) in &self.poses {
            if let Some(e) = self.graph.edges.get(&(*c, m)) {
                edge_residuals(&self.graph.cameras[c], pose, e, &pts, &mut r)?;
            }
        }
        Some(DVector::from_vec(r))
    }

    /// Every PnP candidate for camera `c` through any placed marker it sees
    /// in full, refined against all placed markers it observes.
    fn best_camera(&self, c: CameraId) -> Option<Pose> {
        let k = &self.graph.cameras[&c];
        let mut best: Option<(Pose, f64)> = None;
        for (m, wm) in &self.markers {
            let Some(px) = self.graph.full_edge(c, *m) else { continue };
            for cam_from_marker in planar_pnp_candidates(k, self.graph.markers[m], &px) {
                let seed = cam_from_marker.compose(&wm.inverse());
                if let Some((p, cost)) = refine_pose(seed, |p| self.camera_residuals(c, p)) {
                    if best.is_none_or(|(_, b)| cost < b) {
                        best = Some((p, cost));
                    }
                }
            }
        }
        best.map(|(p, _)| p)
    }

    fn best_marker(&self, m: MarkerId) -> Option<Pose> {
        let mut best: Option<(Pose, f64)> = None;
        for (c, pose) in &self.poses {
            let Some(px) = self.graph.full_edge(*c, m) else { continue };
            for cam_from_marker in planar_pnp_candidates(&self.graph.cameras[c], self.graph.markers[&m], &px) {
                let seed = pose.inverse().compose(&cam_from_marker);
                if let Some((p, cost)) = refine_pose(seed, |p| self.marker_residuals(m, p)) {
                    if best.is_none_or(|(_, b)| cost < b) {
                        best = Some((p, cost));
                    }
                }
            }
        }
        best.map(|(p, _)| p)
    }
}

/// Breadth-first initialization from the anchor marker.
///
/// Each entity is placed by planar PnP through an already-placed neighbour.
/// Both ambiguity branches of every such PnP are tried and the one that best
/// explains all observations of already-placed entities wins. Once the tree
/// is complete, two sweeps re-place every camera and non-anchor marker
/// against the full set of estimates.
pub fn initialize_poses(graph: &CalibrationGraph) -> Result<InitialEstimate, CalibrationError> {
    let comps = graph.components();
    if comps.len() > 1 {
        return Err(CalibrationError::DisconnectedGraph {
            components: comps.iter().map(|c| c.iter().map(|n| n.to_string()).collect()).collect(),
        });
    }
    let mut st = InitState { graph, poses: BTreeMap::new(), markers: BTreeMap::from([(graph.anchor, Pose::identity())]) };
    let mut queue = VecDeque::from([Node::Marker(graph.anchor)]);
    while let Some(node) = queue.pop_front() {
        match node {
            Node::Marker(m) => {
                for &c in graph.cameras.keys() {
                    if st.poses.contains_key(&c) || graph.full_edge(c, m).is_none() {
                        continue;
                    }
                    if let Some(p) = st.best_camera(c) {
                        st.poses.insert(c, p);
                        queue.push_back(Node::Camera(c));
                    }
                }
            }
            Node::Camera(c) => {
                for &m in graph.markers.keys() {
                    if st.markers.contains_key(&m) || graph.full_edge(c, m).is_none() {
                        continue;
                    }
                    if let Some(p) = st.best_marker(m) {
                        st.markers.insert(m, p);
                        queue.push_back(Node::Marker(m));
                    }
                }
            }
        }
    }
    if let Some(&c) = graph.cameras.keys().find(|c| !st.poses.contains_key(c)) {
        return Err(CalibrationError::InsufficientCorners { entity: Node::Camera(c).to_string() });
    }
    if let Some(&m) = graph.markers.keys().find(|m| !st.markers.contains_key(m)) {
        return Err(CalibrationError::InsufficientCorners { entity: Node::Marker(m).to_string() });
    }
    for _ in 0..2 {
        for &c in graph.cameras.keys() {
            if let Some(p) = st.best_camera(c) {
                st.poses.insert(c, p);
            }
        }
        for &m in graph.markers.keys().filter(|&&m| m != graph.anchor) {
            if let Some(p) = st.best_marker(m) {
                st.markers.insert(m, p);
            }
        }
    }
    let marker_corners = st.markers.iter().map(|(&m, p)| (m, st.corners(m, p))).collect();
    Ok(InitialEstimate { poses: st.poses, marker_corners })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub initial_lambda: f64,
    pub max_lambda: f64,
    /// Huber threshold in pixels; `None` keeps the plain squared loss.
    pub huber_px: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iterations: 200, relative_tolerance: 1e-10, initial_lambda: 1e-3, max_lambda: 1e16, huber_px: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub poses: BTreeMap<CameraId, Pose>,
    pub marker_corners: BTreeMap<MarkerId, [Vector3<f64>; 4]>,
    pub rms_px: f64,
    pub iterations: usize,
    /// Sum of squared pixel residuals after each accepted step, starting
    /// with the initial cost.
    pub cost_history: Vec<f64>,
}

impl CalibrationResult {
    pub fn cameras(&self, graph: &CalibrationGraph) -> Vec<CameraModel> {
        self.poses.iter().map(|(&id, p)| CameraModel::new(id, graph.cameras[&id], *p)).collect()
    }
}

/// Parameter layout: 6 per camera (left rotation increment, translation),
/// then 12 per non-anchor marker.
struct Problem<'a> {
    graph: &'a CalibrationGraph,
    cams: Vec<CameraId>,
    free_markers: Vec<MarkerId>,
    obs: Vec<(usize, Option<usize>, MarkerId, usize, Vector2<f64>)>,
}

#[derive(Clone)]
struct State {
    poses: Vec<Pose>,
    corners: BTreeMap<MarkerId, [Vector3<f64>; 4]>,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl<'a> Problem<'a> {
    fn new(graph: &'a CalibrationGraph) -> Self {
        let cams: Vec<_> = graph.cameras.keys().copied().collect();
        let free_markers: Vec<_> = graph.markers.keys().copied().filter(|&m| m != graph.anchor).collect();
        let mut obs = Vec::new();
        for (&(c, m), edge) in &graph.edges {
            let ci = cams.binary_search(&c).unwrap();
            let mi = free_markers.binary_search(&m).ok();
            for (k, p) in edge.iter().enumerate() {
                if let Some(p) = p {
                    obs.push((ci, mi, m, k, *p));
                }
            }
        }
        Self { graph, cams, free_markers, obs }
    }

    fn n_params(&self) -> usize {
        6 * self.cams.len() + 12 * self.free_markers.len()
    }

    /// Residuals (projection minus observation) and optionally the Jacobian.
    fn evaluate(&self, s: &State, with_jacobian: bool) -> Option<(DVector<f64>, Option<DMatrix<f64>>)> {
        let n = self.obs.len();
        let mut r = DVector::zeros(2 * n);
        let mut jac = with_jacobian.then(|| DMatrix::zeros(2 * n, self.n_params()));
        for (row, &(ci, mi, m, k, p)) in self.obs.iter().enumerate() {
            let pose = &s.poses[ci];
            let kk = &self.graph.cameras[&self.cams[ci]];
            let world = s.corners[&m][k];
            let rm = pose.rotation * world;
            let pc = rm + pose.translation;
            if !(pc.z > 1e-9) {
                return None;
            }
            let iz = 1.0 / pc.z;
            r[2 * row] = kk.fx * pc.x * iz + kk.cx - p.x;
            r[2 * row + 1] = kk.fy * pc.y * iz + kk.cy - p.y;
            if let Some(j) = jac.as_mut() {
                let dpi = nalgebra::Matrix2x3::new(kk.fx * iz, 0.0, -kk.fx * pc.x * iz * iz, 0.0, kk.fy * iz, -kk.fy * pc.y * iz * iz);
                let d_rot = dpi * (-skew(&rm));
                let d_rm = dpi * pose.rotation.to_rotation_matrix().matrix();
                let c0 = 6 * ci;
                j.view_mut((2 * row, c0), (2, 3)).copy_from(&d_rot);
                j.view_mut((2 * row, c0 + 3), (2, 3)).copy_from(&dpi);
                if let Some(mi) = mi {
                    let c0 = 6 * self.cams.len() + 12 * mi + 3 * k;
                    j.view_mut((2 * row, c0), (2, 3)).copy_from(&d_rm);
                }
            }
        }
        Some((r, jac))
    }

    fn apply(&self, s: &State, delta: &DVector<f64>) -> State {
        let mut out = s.clone();
        for (i, pose) in out.poses.iter_mut().enumerate() {
            let w = Vector3::new(delta[6 * i], delta[6 * i + 1], delta[6 * i + 2]);
            let dt = Vector3::new(delta[6 * i + 3], delta[6 * i + 4], delta[6 * i + 5]);
            let dr = UnitQuaternion::from_scaled_axis(w);
            // left-multiplied increment: pc' = exp(w) R X + t + dt
            pose.rotation = dr * pose.rotation;
            pose.translation += dt;
        }
        let base = 6 * self.cams.len();
        for (mi, m) in self.free_markers.iter().enumerate() {
            let c = out.corners.get_mut(m).unwrap();
            for (k, corner) in c.iter_mut().enumerate() {
                let o = base + 12 * mi + 3 * k;
                *corner += Vector3::new(delta[o], delta[o + 1], delta[o + 2]);
            }
        }
        out
    }
}

fn robust_cost(r: &DVector<f64>, huber: Option<f64>) -> f64 {
    match huber {
        None => r.norm_squared(),
        Some(h) => r
            .as_slice()
            .chunks(2)
            .map(|c| {
                let e2 = c[0] * c[0] + c[1] * c[1];
                let e = e2.sqrt();
                if e <= h {
                    e2
                } else {
                    2.0 * h * e - h * h
                }
            })
            .sum(),
    }
}

/// Per-residual-pair IRLS weights for the Huber loss.
fn huber_weights(r: &DVector<f64>, h: f64) -> Vec<f64> {
    r.as_slice()
        .chunks(2)
        .map(|c| {
            let e = (c[0] * c[0] + c[1] * c[1]).sqrt();
            if e <= h {
                1.0
            } else {
                h / e
            }
        })
        .collect()
}

pub fn solve_extrinsics(graph: &CalibrationGraph, init: &InitialEstimate, opts: &SolverOptions) -> Result<CalibrationResult, CalibrationError> {
    if graph.edges.is_empty() {
        return Err(CalibrationError::EmptyInput);
    }
    let problem = Problem::new(graph);
    let mut poses = Vec::with_capacity(problem.cams.len());
    for c in &problem.cams {
        poses.push(*init.poses.get(c).ok_or_else(|| CalibrationError::MissingEntity(Node::Camera(*c).to_string()))?);
    }
    let mut corners = BTreeMap::new();
    for (&m, &side) in &graph.markers {
        let c = if m == graph.anchor {
            marker_corners_local(side)
        } else {
            *init.marker_corners.get(&m).ok_or_else(|| CalibrationError::MissingEntity(Node::Marker(m).to_string()))?
        };
        corners.insert(m, c);
    }
    let mut state = State { poses, corners };
    let (mut r, _) = problem.evaluate(&state, false).ok_or(CalibrationError::DivergedSolve { cost: f64::INFINITY })?;
    let mut cost = robust_cost(&r, opts.huber_px);
    let mut history = vec![cost];
    let mut lambda = opts.initial_lambda;
    let mut iterations = 0;
    let tiny = 1e-20 * problem.obs.len().max(1) as f64;
    while iterations < opts.max_iterations && cost > tiny {
        let (res, jac) = problem.evaluate(&state, true).expect("current state is feasible");
        let mut jac = jac.unwrap();
        let mut res = res;
        if let Some(h) = opts.huber_px {
            for (i, w) in huber_weights(&res, h).into_iter().enumerate() {
                let s = w.sqrt();
                res[2 * i] *= s;
                res[2 * i + 1] *= s;
                jac.row_mut(2 * i).scale_mut(s);
                jac.row_mut(2 * i + 1).scale_mut(s);
            }
        }
        let a = jac.tr_mul(&jac);
        let g = jac.tr_mul(&res);
        let accepted = loop {
            let mut damped = a.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-9);
            }
            let step = damped.cholesky().map(|ch| -ch.solve(&g));
            if let Some(delta) = step {
                let trial = problem.apply(&state, &delta);
                if let Some((tr, _)) = problem.evaluate(&trial, false) {
                    let tc = robust_cost(&tr, opts.huber_px);
                    if tc < cost {
                        lambda = (lambda / 10.0).max(1e-12);
                        break Some((trial, tr, tc));
                    }
                }
            }
            lambda *= 10.0;
            if lambda > opts.max_lambda {
                break None;
            }
        };
        let Some((trial, tr, tc)) = accepted else {
            // no decreasing step at any damping: accept only a stationary point
            if g.amax() <= 1e-6 * (1.0 + cost) {
                break;
            }
            if a.diagonal().iter().any(|d| !(d.is_finite())) {
                return Err(CalibrationError::SingularNormalEquations);
            }
            return Err(CalibrationError::DivergedSolve { cost });
        };
        iterations += 1;
        let rel = (cost - tc) / cost;
        debug_assert!(tc <= cost);
        state = trial;
        r = tr;
        cost = tc;
        history.push(cost);
        if rel < opts.relative_tolerance {
            break;
        }
    }
    let rms_px = (r.norm_squared() / problem.obs.len() as f64).sqrt();
    Ok(CalibrationResult {
        poses: problem.cams.iter().copied().zip(state.poses).collect(),
        marker_corners: state.corners,
        rms_px,
        iterations,
        cost_history: history,
    })
}

/// Initialization followed by refinement.
pub fn calibrate(graph: &CalibrationGraph, opts: &SolverOptions) -> Result<CalibrationResult, CalibrationError> {
    let init = initialize_poses(graph)?;
    solve_extrinsics(graph, &init, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub rms: f64,
    pub max: f64,
    pub per_camera: BTreeMap<CameraId, f64>,
    pub count: usize,
}

pub fn reprojection_rms(
    poses: &BTreeMap<CameraId, Pose>,
    marker_corners: &BTreeMap<MarkerId, [Vector3<f64>; 4]>,
    graph: &CalibrationGraph,
) -> Result<ResidualStats, CalibrationError> {
    let obs = graph.observations();
    if obs.is_empty() {
        return Err(CalibrationError::EmptyInput);
    }
    let mut total = 0.0;
    let mut max: f64 = 0.0;
    let mut per: BTreeMap<CameraId, (f64, usize)> = BTreeMap::new();
    for o in &obs {
        let pose = poses.get(&o.camera_id).ok_or_else(|| CalibrationError::MissingEntity(Node::Camera(o.camera_id).to_string()))?;
        let corners = marker_corners.get(&o.marker_id).ok_or_else(|| CalibrationError::MissingEntity(Node::Marker(o.marker_id).to_string()))?;
        let cam = CameraModel::new(o.camera_id, graph.cameras[&o.camera_id], *pose);
        let e2 = match cam.project_point(&corners[o.corner_index as usize]) {
            Ok(p) => (p - Vector2::from(o.pixel)).norm_squared(),
            Err(_) => f64::INFINITY,
        };
        total += e2;
        max = max.max(e2.sqrt());
        let slot = per.entry(o.camera_id).or_default();
        slot.0 += e2;
        slot.1 += 1;
    }
    Ok(ResidualStats {
        rms: (total / obs.len() as f64).sqrt(),
        max,
        per_camera: per.into_iter().map(|(c, (s, n))| (c, (s / n as f64).sqrt())).collect(),
        count: obs.len(),
    })
}

/// Rotation angle (rad) and translation distance (mm) between two poses.
pub fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
    (a.rotation.angle_to(&b.rotation), (a.translation - b.translation).norm())
}
