//! Tracking-by-detection on the ground plane.
//!
//! Each frame, active tracklets are associated with top-down detections by a
//! Hungarian assignment over a gated cost that mixes ground-plane distance
//! and color-histogram (Bhattacharyya) distance.

mod hungarian;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use hungarian::{hungarian_assign, Assignment, CostMatrix};

use crate::detect::Detection;
use crate::fusion::{PointCloud, TopDownMap};
use crate::project::{estimate_height, TopDownRegion};

pub type TrackId = u64;

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("point cloud carries no colors")]
    NoColor,
    #[error("frame {got} does not follow frame cursor {cursor:?}")]
    FrameOrderViolation { cursor: Option<u64>, got: u64 },
    #[error("invalid track data: {0}")]
    InvalidTracks(String),
}

/// L1-normalized 4×4×4 RGB histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorHistogram(pub Vec<f64>);

impl ColorHistogram {
    pub fn bin(rgb: [u8; 3]) -> usize {
        (rgb[0] as usize >> 6) * 16 + (rgb[1] as usize >> 6) * 4 + (rgb[2] as usize >> 6)
    }

    pub fn from_colors<'a>(colors: impl IntoIterator<Item = &'a [u8; 3]>) -> Option<Self> {
        let mut bins = vec![0.0; HISTOGRAM_BINS];
        let mut total = 0usize;
        for c in colors {
            bins[Self::bin(*c)] += 1.0;
            total += 1;
        }
        if total == 0 {
            return None;
        }
        bins.iter_mut().for_each(|b| *b /= total as f64);
        Some(Self(bins))
    }

    /// Hellinger form of the Bhattacharyya distance, in `[0, 1]`.
    pub fn bhattacharyya(&self, other: &Self) -> f64 {
        let bc: f64 = self.0.iter().zip(&other.0).map(|(a, b)| (a * b).sqrt()).sum();
        (1.0 - bc).max(0.0).sqrt()
    }
}

/// Vertical column over a ground rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub min_xy: [f64; 2],
    pub max_xy: [f64; 2],
    pub z_min: f64,
    pub z_max: f64,
}

impl Column {
    pub fn around(center: [f64; 2], side_mm: f64, z_min: f64, z_max: f64) -> Self {
        let h = side_mm / 2.0;
        Self { min_xy: [center[0] - h, center[1] - h], max_xy: [center[0] + h, center[1] + h], z_min, z_max }
    }

    pub fn contains(&self, p: &nalgebra::Vector3<f64>) -> bool {
        p.x >= self.min_xy[0] && p.x < self.max_xy[0] && p.y >= self.min_xy[1] && p.y < self.max_xy[1] && p.z >= self.z_min && p.z < self.z_max
    }
}

/// Color histogram of the points inside a column. `Ok(None)` when the column
/// holds no points.
pub fn appearance_histogram(cloud: &PointCloud, column: &Column) -> Result<Option<ColorHistogram>, TrackError> {
    let colors = cloud.colors.as_ref().ok_or(TrackError::NoColor)?;
    Ok(ColorHistogram::from_colors(
        cloud.points.iter().zip(colors).filter(|(p, _)| column.contains(p)).map(|(_, c)| c),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub frame_index: u64,
    pub world_xy: [f64; 2],
    pub height_mm: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<ColorHistogram>,
    pub matched: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Candidate,
    Confirmed,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: TrackId,
    pub states: Vec<TrackState>,
    pub status: TrackStatus,
    /// Consecutive frames without a match.
    pub misses: u32,
    /// Matched detections, including the one that opened the tracklet.
    pub hits: u32,
    /// Frame at which the tracklet was first confirmed.
    pub confirmed_at: Option<u64>,
}

impl Tracklet {
    pub fn last(&self) -> Option<&TrackState> {
        self.states.last()
    }

    pub fn first_frame(&self) -> Option<u64> {
        self.states.first().map(|s| s.frame_index)
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.states.last().map(|s| s.frame_index)
    }

    pub fn is_active(&self) -> bool {
        self.status != TrackStatus::Terminated
    }

    /// Confirmed at some point; only these are emitted as results.
    pub fn is_reportable(&self) -> bool {
        self.confirmed_at.is_some()
    }

    fn appearance(&self) -> Option<&ColorHistogram> {
        self.states.iter().rev().find_map(|s| s.histogram.as_ref())
    }

    pub fn state_at(&self, frame: u64) -> Option<&TrackState> {
        self.states.binary_search_by_key(&frame, |s| s.frame_index).ok().map(|i| &self.states[i])
    }
}

/// One line of the track exchange format (also used for ground truth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: u64,
    pub id: TrackId,
    pub x_mm: f64,
    pub y_mm: f64,
    pub h_mm: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    /// Sorted by id.
    pub tracklets: Vec<Tracklet>,
    pub next_id: TrackId,
    pub frame_cursor: Option<u64>,
}

impl Default for TrackSet {
    fn default() -> Self {
        Self::new()
    }
}

impl TrackSet {
    pub fn new() -> Self {
        Self { tracklets: Vec::new(), next_id: 1, frame_cursor: None }
    }

    pub fn get(&self, id: TrackId) -> Option<&Tracklet> {
        self.tracklets.binary_search_by_key(&id, |t| t.id).ok().map(|i| &self.tracklets[i])
    }

    pub fn get_mut(&mut self, id: TrackId) -> Option<&mut Tracklet> {
        self.tracklets.binary_search_by_key(&id, |t| t.id).ok().map(move |i| &mut self.tracklets[i])
    }

    pub fn allocate_id(&mut self) -> TrackId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn insert(&mut self, t: Tracklet) {
        match self.tracklets.binary_search_by_key(&t.id, |x| x.id) {
            Ok(i) => self.tracklets[i] = t,
            Err(i) => self.tracklets.insert(i, t),
        }
    }

    pub fn state_count(&self) -> usize {
        self.tracklets.iter().map(|t| t.states.len()).sum()
    }

    /// Builds a set of confirmed tracklets from exchange records.
    pub fn from_records(records: &[TrackRecord]) -> Result<Self, TrackError> {
        let mut by_id: BTreeMap<TrackId, Vec<TrackState>> = BTreeMap::new();
        for r in records {
            if r.id == 0 {
                return Err(TrackError::InvalidTracks("track id 0 is reserved".into()));
            }
            by_id.entry(r.id).or_default().push(TrackState {
                frame_index: r.frame,
                world_xy: [r.x_mm, r.y_mm],
                height_mm: r.h_mm,
                score: r.score,
                histogram: None,
                matched: true,
            });
        }
        let mut set = TrackSet::new();
        for (id, mut states) in by_id {
            states.sort_by_key(|s| s.frame_index);
            if states.windows(2).any(|w| w[0].frame_index == w[1].frame_index) {
                return Err(TrackError::InvalidTracks(format!("track {id} has two states in one frame")));
            }
            let first = states[0].frame_index;
            set.tracklets.push(Tracklet {
                id,
                hits: states.len() as u32,
                states,
                status: TrackStatus::Confirmed,
                misses: 0,
                confirmed_at: Some(first),
            });
            set.next_id = set.next_id.max(id + 1);
        }
        set.frame_cursor = set.tracklets.iter().filter_map(|t| t.last_frame()).max();
        Ok(set)
    }

    /// Records of every reportable tracklet, sorted by `(frame, id)`.
    pub fn to_records(&self) -> Vec<TrackRecord> {
        let mut out: Vec<TrackRecord> = self
            .tracklets
            .iter()
            .filter(|t| t.is_reportable())
            .flat_map(|t| {
                t.states.iter().map(move |s| TrackRecord {
                    frame: s.frame_index,
                    id: t.id,
                    x_mm: s.world_xy[0],
                    y_mm: s.world_xy[1],
                    h_mm: s.height_mm,
                    score: s.score,
                })
            })
            .collect();
        out.sort_by_key(|r| (r.frame, r.id));
        out
    }

    /// Content digest used for optimistic concurrency on edits.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("track set serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Checks the structural invariants: unique sorted ids below `next_id`
    /// and strictly increasing frames per tracklet.
    pub fn check_invariants(&self) -> Result<(), TrackError> {
        for w in self.tracklets.windows(2) {
            if w[0].id >= w[1].id {
                return Err(TrackError::InvalidTracks(format!("ids {} and {} out of order or duplicated", w[0].id, w[1].id)));
            }
        }
        for t in &self.tracklets {
            if t.id >= self.next_id {
                return Err(TrackError::InvalidTracks(format!("id {} not below next_id {}", t.id, self.next_id)));
            }
            if t.states.windows(2).any(|w| w[0].frame_index >= w[1].frame_index) {
                return Err(TrackError::InvalidTracks(format!("track {} frames not strictly increasing", t.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub spatial: f64,
    pub appearance: f64,
    pub gate_mm: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { spatial: 0.7, appearance: 0.3, gate_mm: 1000.0 }
    }
}

/// A detection together with its appearance, as seen by the association step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub detection: Detection,
    pub height_mm: f64,
    pub histogram: Option<ColorHistogram>,
}

/// Association cost of a tracklet's last state against an observation, or
/// `None` when gated out. When either side lacks a histogram, the
/// appearance weight is folded into the spatial term.
pub fn pair_cost(track: &Tracklet, obs: &Observation, w: &CostWeights) -> Option<f64> {
    let last = track.last()?;
    let dx = last.world_xy[0] - obs.detection.world_xy[0];
    let dy = last.world_xy[1] - obs.detection.world_xy[1];
    let dist = (dx * dx + dy * dy).sqrt();
    if dist > w.gate_mm {
        return None;
    }
    let spatial = (dist / w.gate_mm).min(1.0);
    Some(match (track.appearance(), &obs.histogram) {
        (Some(a), Some(b)) => w.spatial * spatial + w.appearance * a.bhattacharyya(b),
        _ => (w.spatial + w.appearance) * spatial,
    })
}

pub fn cost_matrix(tracklets: &[&Tracklet], observations: &[Observation], weights: &CostWeights) -> CostMatrix {
    let mut m = CostMatrix::new(tracklets.len(), observations.len());
    for (r, t) in tracklets.iter().enumerate() {
        for (c, o) in observations.iter().enumerate() {
            match pair_cost(t, o, weights) {
                Some(v) => m.set(r, c, v),
                None => m.forbid(r, c),
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    pub weights: CostWeights,
    /// Minimum detection score to open a tracklet.
    pub init_threshold: f64,
    /// Hits (including the opening detection) before a candidate is confirmed.
    pub confirm_hits: u32,
    /// Consecutive misses after which a confirmed tracklet terminates.
    pub max_misses: u32,
    /// Side of the square ground footprint used for height and color.
    pub footprint_mm: f64,
    /// Points below this height are ignored for appearance (floor).
    pub appearance_min_z_mm: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            init_threshold: 0.5,
            confirm_hits: 3,
            max_misses: 15,
            footprint_mm: 500.0,
            appearance_min_z_mm: 300.0,
        }
    }
}

/// Per-frame sensor context used to describe detections.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrameContext<'a> {
    pub cloud: Option<&'a PointCloud>,
    pub map: Option<&'a TopDownMap>,
}

/// Attaches height and appearance to each detection. Height comes from the
/// heightmap over the detection footprint when available, else from the
/// detection's own peak.
pub fn describe(detections: &[Detection], ctx: &FrameContext<'_>, params: &TrackerParams) -> Vec<Observation> {
    detections
        .iter()
        .map(|d| {
            let height_mm = ctx
                .map
                .and_then(|map| estimate_height(map, &TopDownRegion::around(d.world_xy, params.footprint_mm)).ok())
                .unwrap_or_else(|| d.peak_value as f64 * ctx.map.map_or(crate::fusion::DEFAULT_CELL_MM, |m| m.cell_mm()));
            let histogram = ctx.cloud.and_then(|cloud| {
                let col = Column::around(d.world_xy, params.footprint_mm, params.appearance_min_z_mm, f64::INFINITY);
                appearance_histogram(cloud, &col).ok().flatten()
            });
            Observation { detection: *d, height_mm, histogram }
        })
        .collect()
}

/// Advances the track set by one frame of detections.
pub fn tracker_step(
    set: &mut TrackSet,
    frame: u64,
    detections: &[Detection],
    ctx: &FrameContext<'_>,
    params: &TrackerParams,
) -> Result<(), TrackError> {
    let observations = describe(detections, ctx, params);
    tracker_step_observed(set, frame, &observations, params)
}

pub fn tracker_step_observed(set: &mut TrackSet, frame: u64, observations: &[Observation], params: &TrackerParams) -> Result<(), TrackError> {
    if let Some(cursor) = set.frame_cursor {
        if frame != cursor + 1 {
            return Err(TrackError::FrameOrderViolation { cursor: Some(cursor), got: frame });
        }
    }
    let active: Vec<usize> = (0..set.tracklets.len()).filter(|&i| set.tracklets[i].is_active()).collect();
    let assignment = {
        let rows: Vec<&Tracklet> = active.iter().map(|&i| &set.tracklets[i]).collect();
        hungarian_assign(&cost_matrix(&rows, observations, &params.weights))
    };

    for &(r, c) in &assignment.pairs {
        let t = &mut set.tracklets[active[r]];
        let o = &observations[c];
        t.states.push(TrackState {
            frame_index: frame,
            world_xy: o.detection.world_xy,
            height_mm: o.height_mm,
            score: o.detection.score,
            histogram: o.histogram.clone(),
            matched: true,
        });
        t.misses = 0;
        t.hits += 1;
        if t.status == TrackStatus::Candidate && t.hits >= params.confirm_hits {
            t.status = TrackStatus::Confirmed;
            t.confirmed_at = Some(frame);
        }
    }
    for &r in &assignment.unmatched_rows {
        let t = &mut set.tracklets[active[r]];
        t.misses += 1;
        match t.status {
            // Candidates need consecutive hits.
            TrackStatus::Candidate => t.status = TrackStatus::Terminated,
            TrackStatus::Confirmed if t.misses >= params.max_misses => t.status = TrackStatus::Terminated,
            _ => {}
        }
    }
    for &c in &assignment.unmatched_cols {
        let o = &observations[c];
        if o.detection.score < params.init_threshold {
            continue;
        }
        let id = set.allocate_id();
        let confirmed = params.confirm_hits <= 1;
        set.tracklets.push(Tracklet {
            id,
            states: vec![TrackState {
                frame_index: frame,
                world_xy: o.detection.world_xy,
                height_mm: o.height_mm,
                score: o.detection.score,
                histogram: o.histogram.clone(),
                matched: true,
            }],
            status: if confirmed { TrackStatus::Confirmed } else { TrackStatus::Candidate },
            misses: 0,
            hits: 1,
            confirmed_at: confirmed.then_some(frame),
        });
    }
    set.frame_cursor = Some(frame);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x: f64, y: f64, score: f64) -> Detection {
        Detection { cell: (0, 0), world_xy: [x, y], score, peak_value: 85 }
    }

    fn obs(x: f64, y: f64, hist: Option<ColorHistogram>) -> Observation {
        Observation { detection: det(x, y, 0.9), height_mm: 1700.0, histogram: hist }
    }

    fn red() -> ColorHistogram {
        ColorHistogram::from_colors(&[[255, 0, 0]]).unwrap()
    }

    #[test]
    fn pure_red_fills_one_bin() {
        let colors = vec![[250u8, 3, 10]; 50];
        let h = ColorHistogram::from_colors(&colors).unwrap();
        assert_eq!(h.0[48], 1.0);
        assert_eq!(h.0.iter().filter(|&&v| v > 0.0).count(), 1);
        assert_eq!(h.bhattacharyya(&h), 0.0);
    }

    #[test]
    fn uniform_colors_fill_bins_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000usize;
        let colors: Vec<[u8; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let h = ColorHistogram::from_colors(&colors).unwrap();
        let p = 1.0 / 64.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        // 3σ per bin; over 64 bins a couple of excursions are expected
        let outside = h.0.iter().filter(|b| (*b - p).abs() > 3.0 * sigma).count();
        assert!(outside <= 2, "{outside} bins beyond 3σ");
        assert!(h.0.iter().all(|b| (b - p).abs() <= 5.0 * sigma));
        assert!((h.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn histogram_needs_colors() {
        let cloud = PointCloud { points: vec![nalgebra::Vector3::new(0.0, 0.0, 1000.0)], colors: None };
        let col = Column::around([0.0, 0.0], 500.0, 0.0, 3000.0);
        assert_eq!(appearance_histogram(&cloud, &col), Err(TrackError::NoColor));
        let cloud = PointCloud { colors: Some(vec![[0, 0, 255]]), ..cloud };
        assert!(appearance_histogram(&cloud, &col).unwrap().is_some());
        let far = Column::around([5000.0, 0.0], 500.0, 0.0, 3000.0);
        assert_eq!(appearance_histogram(&cloud, &far).unwrap(), None);
    }

    fn track_at(id: TrackId, x: f64, y: f64, hist: Option<ColorHistogram>) -> Tracklet {
        Tracklet {
            id,
            states: vec![TrackState { frame_index: 0, world_xy: [x, y], height_mm: 1700.0, score: 1.0, histogram: hist, matched: true }],
            status: TrackStatus::Confirmed,
            misses: 0,
            hits: 3,
            confirmed_at: Some(0),
        }
    }

    #[test]
    fn cost_examples() {
        let t = track_at(1, 100.0, 200.0, Some(red()));
        let w = CostWeights::default();
        assert_eq!(pair_cost(&t, &obs(100.0, 200.0, Some(red())), &w), Some(0.0));
        assert_eq!(pair_cost(&t, &obs(2100.0, 200.0, Some(red())), &w), None);
        let c = pair_cost(&t, &obs(600.0, 200.0, None), &w).unwrap();
        assert!((c - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cost_matrix_matches_direct_formula() {
        let hists: Vec<ColorHistogram> = [[200u8, 10, 10], [10, 200, 10], [10, 10, 200]]
            .iter()
            .map(|c| ColorHistogram::from_colors(&[*c, [128, 128, 128]]).unwrap())
            .collect();
        let tracks = [
            track_at(1, 0.0, 0.0, Some(hists[0].clone())),
            track_at(2, 800.0, 0.0, Some(hists[1].clone())),
            track_at(3, 0.0, 900.0, Some(hists[2].clone())),
        ];
        let observations = [obs(50.0, 30.0, Some(hists[0].clone())), obs(700.0, 100.0, Some(hists[2].clone())), obs(0.0, 1500.0, Some(hists[1].clone()))];
        let refs: Vec<&Tracklet> = tracks.iter().collect();
        let m = cost_matrix(&refs, &observations, &CostWeights::default());
        for (r, t) in tracks.iter().enumerate() {
            for (c, o) in observations.iter().enumerate() {
                let (a, b) = (t.states[0].world_xy, o.detection.world_xy);
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                let ha = t.states[0].histogram.as_ref().unwrap();
                let hb = o.histogram.as_ref().unwrap();
                let bc: f64 = (0..64).map(|i| (ha.0[i] * hb.0[i]).sqrt()).sum();
                let expect = (d <= 1000.0).then(|| 0.7 * d / 1000.0 + 0.3 * (1.0 - bc).max(0.0).sqrt());
                match (m.get(r, c), expect) {
                    (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                    (x, y) => assert_eq!(x, y),
                }
            }
        }
    }

    #[test]
    fn initialization_threshold() {
        let p = TrackerParams::default();
        let mut set = TrackSet::new();
        tracker_step(&mut set, 0, &[det(0.0, 0.0, 0.9)], &FrameContext::default(), &p).unwrap();
        assert_eq!(set.tracklets.len(), 1);
        assert_eq!(set.tracklets[0].status, TrackStatus::Candidate);
        let mut set = TrackSet::new();
        tracker_step(&mut set, 0, &[det(0.0, 0.0, 0.3)], &FrameContext::default(), &p).unwrap();
        assert!(set.tracklets.is_empty());
    }

    #[test]
    fn lifecycle_confirm_and_terminate() {
        let p = TrackerParams::default();
        let mut set = TrackSet::new();
        for f in 0..3 {
            tracker_step(&mut set, f, &[det(10.0 * f as f64, 0.0, 0.9)], &FrameContext::default(), &p).unwrap();
        }
        assert_eq!(set.tracklets[0].status, TrackStatus::Confirmed);
        assert_eq!(set.tracklets[0].confirmed_at, Some(2));
        for f in 3..17 {
            tracker_step(&mut set, f, &[], &FrameContext::default(), &p).unwrap();
            assert_eq!(set.tracklets[0].misses as u64, f - 2);
        }
        assert_eq!(set.tracklets[0].status, TrackStatus::Confirmed);
        tracker_step(&mut set, 17, &[], &FrameContext::default(), &p).unwrap();
        assert_eq!(set.tracklets[0].status, TrackStatus::Terminated);
        // terminated tracks never revive; a new id is allocated
        tracker_step(&mut set, 18, &[det(20.0, 0.0, 0.9)], &FrameContext::default(), &p).unwrap();
        assert_eq!(set.tracklets.len(), 2);
        assert_eq!(set.tracklets[1].id, 2);
        assert_eq!(set.tracklets[0].states.len(), 3);
    }

    #[test]
    fn candidate_dies_on_first_miss() {
        let p = TrackerParams::default();
        let mut set = TrackSet::new();
        tracker_step(&mut set, 0, &[det(0.0, 0.0, 0.9)], &FrameContext::default(), &p).unwrap();
        tracker_step(&mut set, 1, &[], &FrameContext::default(), &p).unwrap();
        assert_eq!(set.tracklets[0].status, TrackStatus::Terminated);
        assert!(set.to_records().is_empty());
    }

    #[test]
    fn frame_order_enforced() {
        let p = TrackerParams::default();
        let mut set = TrackSet::new();
        tracker_step(&mut set, 5, &[], &FrameContext::default(), &p).unwrap();
        assert!(matches!(tracker_step(&mut set, 5, &[], &FrameContext::default(), &p), Err(TrackError::FrameOrderViolation { .. })));
        assert!(matches!(tracker_step(&mut set, 7, &[], &FrameContext::default(), &p), Err(TrackError::FrameOrderViolation { .. })));
        tracker_step(&mut set, 6, &[], &FrameContext::default(), &p).unwrap();
    }

    #[test]
    fn records_roundtrip_through_track_set() {
        let records = vec![
            TrackRecord { frame: 0, id: 3, x_mm: 1.0, y_mm: 2.0, h_mm: 1700.0, score: 1.0 },
            TrackRecord { frame: 1, id: 3, x_mm: 1.5, y_mm: 2.0, h_mm: 1700.0, score: 1.0 },
            TrackRecord { frame: 1, id: 7, x_mm: 9.0, y_mm: 2.0, h_mm: 1600.0, score: 0.8 },
        ];
        let set = TrackSet::from_records(&records).unwrap();
        assert_eq!(set.next_id, 8);
        set.check_invariants().unwrap();
        assert_eq!(set.to_records(), records);
        let dup = vec![records[0].clone(), records[0].clone()];
        assert!(TrackSet::from_records(&dup).is_err());
    }
}
