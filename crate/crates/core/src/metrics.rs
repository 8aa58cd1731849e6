//! CLEAR-MOT and IDF1 on the ground plane.
//!
//! Objects are ground points; a prediction and a ground-truth object can be
//! matched when their Euclidean distance is at most the threshold (1 m by
//! default).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::track::{hungarian_assign, CostMatrix, TrackId, TrackRecord, TrackSet};

pub const DEFAULT_THRESHOLD_MM: f64 = 1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ground truth is empty")]
    EmptyGroundTruth,
}

/// Per-frame object positions keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FramePoints {
    frames: BTreeMap<u64, Vec<(TrackId, [f64; 2])>>,
}

impl FramePoints {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: u64, id: TrackId, xy: [f64; 2]) {
        self.frames.entry(frame).or_default().push((id, xy));
    }

    pub fn from_records(records: &[TrackRecord]) -> Self {
        let mut p = Self::new();
        for r in records {
            p.push(r.frame, r.id, [r.x_mm, r.y_mm]);
        }
        p
    }

    pub fn from_tracks(set: &TrackSet) -> Self {
        Self::from_records(&set.to_records())
    }

    pub fn total(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn frame(&self, f: u64) -> &[(TrackId, [f64; 2])] {
        self.frames.get(&f).map_or(&[], Vec::as_slice)
    }

    pub fn frames(&self) -> impl Iterator<Item = u64> + '_ {
        self.frames.keys().copied()
    }

    /// Same trajectories under an id mapping.
    pub fn relabeled(&self, f: impl Fn(TrackId) -> TrackId) -> Self {
        let mut out = Self::new();
        for (&frame, objs) in &self.frames {
            for &(id, xy) in objs {
                out.push(frame, f(id), xy);
            }
        }
        out
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClearMot {
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ids: usize,
    pub matches: usize,
    pub gt_total: usize,
    pub mota: f64,
}

/// Per-frame CLEAR-MOT matching.
///
/// Correspondences from the previous frame are kept while still within the
/// threshold; the remaining objects are matched by a Hungarian assignment on
/// distance. An identity switch is counted each time a ground-truth object
/// is matched to a different prediction id than at its most recent match.
pub fn clear_mot_evaluate(gt: &FramePoints, pred: &FramePoints, threshold_mm: f64) -> Result<ClearMot, MetricsError> {
    if gt.total() == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    Ok(clear_mot_core(gt, pred, threshold_mm).0)
}

/// The `(frame, gt_id, pred_id)` correspondences CLEAR-MOT settles on.
pub fn match_frames(gt: &FramePoints, pred: &FramePoints, threshold_mm: f64) -> Vec<(u64, TrackId, TrackId)> {
    clear_mot_core(gt, pred, threshold_mm).1
}

fn clear_mot_core(gt: &FramePoints, pred: &FramePoints, threshold_mm: f64) -> (ClearMot, Vec<(u64, TrackId, TrackId)>) {
    let gt_total = gt.total();
    let mut pairs = Vec::new();
    let frames: BTreeSet<u64> = gt.frames().chain(pred.frames()).collect();
    let mut out = ClearMot { gt_total, ..Default::default() };
    let mut previous: HashMap<TrackId, TrackId> = HashMap::new();
    let mut last_match: HashMap<TrackId, TrackId> = HashMap::new();

    for f in frames {
        let g = gt.frame(f);
        let p = pred.frame(f);
        let mut g_used = vec![false; g.len()];
        let mut p_used = vec![false; p.len()];
        let mut matched: Vec<(usize, usize)> = Vec::new();

        for (gi, (gid, gxy)) in g.iter().enumerate() {
            let Some(&pid) = previous.get(gid) else { continue };
            if let Some(pi) = p.iter().position(|(id, _)| *id == pid) {
                if !p_used[pi] && dist(*gxy, p[pi].1) <= threshold_mm {
                    g_used[gi] = true;
                    p_used[pi] = true;
                    matched.push((gi, pi));
                }
            }
        }

        let rest_g: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let rest_p: Vec<usize> = (0..p.len()).filter(|&i| !p_used[i]).collect();
        let mut cost = CostMatrix::new(rest_g.len(), rest_p.len());
        for (r, &gi) in rest_g.iter().enumerate() {
            for (c, &pi) in rest_p.iter().enumerate() {
                let d = dist(g[gi].1, p[pi].1);
                if d <= threshold_mm {
                    cost.set(r, c, d);
                } else {
                    cost.forbid(r, c);
                }
            }
        }
        for (r, c) in hungarian_assign(&cost).pairs {
            matched.push((rest_g[r], rest_p[c]));
        }

        previous.clear();
        for &(gi, pi) in &matched {
            let (gid, pid) = (g[gi].0, p[pi].0);
            if let Some(&before) = last_match.get(&gid) {
                if before != pid {
                    out.ids += 1;
                }
            }
            last_match.insert(gid, pid);
            previous.insert(gid, pid);
            pairs.push((f, gid, pid));
        }
        out.matches += matched.len();
        out.fp += p.len() - matched.len();
        out.fn_ += g.len() - matched.len();
    }
    out.mota = if gt_total == 0 { 0.0 } else { 100.0 * (1.0 - (out.fp + out.fn_ + out.ids) as f64 / gt_total as f64) };
    (out, pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IdScores {
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

/// Identity F1 under a global one-to-one matching of trajectories.
///
/// Minimizing the total ID-mismatch count (unmatched frames on both sides) is
/// the same as maximizing the number of frames where matched trajectories
/// are within the threshold, which is what the assignment here optimizes.
pub fn idf1_evaluate(gt: &FramePoints, pred: &FramePoints, threshold_mm: f64) -> Result<IdScores, MetricsError> {
    let gt_total = gt.total();
    if gt_total == 0 {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let pred_total = pred.total();
    let gt_ids: Vec<TrackId> = gt.frames.values().flatten().map(|(id, _)| *id).collect::<BTreeSet<_>>().into_iter().collect();
    let pred_ids: Vec<TrackId> = pred.frames.values().flatten().map(|(id, _)| *id).collect::<BTreeSet<_>>().into_iter().collect();
    let gi: HashMap<TrackId, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let pi: HashMap<TrackId, usize> = pred_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut overlap = vec![vec![0usize; pred_ids.len()]; gt_ids.len()];
    for (&f, gs) in &gt.frames {
        for &(gid, gxy) in gs {
            for &(pid, pxy) in pred.frame(f) {
                if dist(gxy, pxy) <= threshold_mm {
                    overlap[gi[&gid]][pi[&pid]] += 1;
                }
            }
        }
    }
    let mut cost = CostMatrix::new(gt_ids.len(), pred_ids.len());
    for (r, row) in overlap.iter().enumerate() {
        for (c, &o) in row.iter().enumerate() {
            cost.set(r, c, -(o as f64));
        }
    }
    let idtp: usize = hungarian_assign(&cost).pairs.iter().map(|&(r, c)| overlap[r][c]).sum();
    let idfn = gt_total - idtp;
    let idfp = pred_total - idtp;
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    Ok(IdScores {
        idf1: pct(2 * idtp, 2 * idtp + idfp + idfn),
        idp: pct(idtp, idtp + idfp),
        idr: pct(idtp, idtp + idfn),
        idtp,
        idfp,
        idfn,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotReport {
    pub idf1: f64,
    pub mota: f64,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ids: usize,
    pub idp: f64,
    pub idr: f64,
    pub gt_total: usize,
}

pub fn evaluate(gt: &FramePoints, pred: &FramePoints, threshold_mm: f64) -> Result<MotReport, MetricsError> {
    let clear = clear_mot_evaluate(gt, pred, threshold_mm)?;
    let id = idf1_evaluate(gt, pred, threshold_mm)?;
    Ok(MotReport {
        idf1: id.idf1,
        mota: clear.mota,
        fp: clear.fp,
        fn_: clear.fn_,
        ids: clear.ids,
        idp: id.idp,
        idr: id.idr,
        gt_total: clear.gt_total,
    })
}

fn one_decimal(v: f64) -> String {
    let s = format!("{v:.1}");
    s.strip_suffix(".0").map(str::to_owned).unwrap_or(s)
}

/// Plain-text results table, one row per named sequence.
pub fn format_table(rows: &[(String, MotReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(4);
    let mut s = String::new();
    let _ = writeln!(s, "{:<width$} | {:>5} | {:>5} | {:>5} | {:>5} | {:>5}", "Envs", "IDF1", "MOTA", "FP", "FN", "IDs");
    let _ = writeln!(s, "{}", "-".repeat(width + 40));
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<width$} | {:>5} | {:>5} | {:>5} | {:>5} | {:>5}",
            name,
            one_decimal(r.idf1),
            one_decimal(r.mota),
            r.fp,
            r.fn_,
            r.ids
        );
    }
    s
}
