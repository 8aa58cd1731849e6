//! Tracklet-level corrections: merge, split, delete and reassign, an
//! append-only edit log with optimistic concurrency, and the HTTP service
//! that exposes both.
//!
//! Boxes are never edited directly; per-camera labels are regenerated from
//! the corrected top-down tracks.

pub mod service;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::metrics::{match_frames, FramePoints};
use crate::track::{TrackId, TrackSet, TrackState, TrackStatus, Tracklet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotateError {
    #[error("unknown track id {0}")]
    UnknownId(TrackId),
    #[error("both tracklets have a state at frame {frame}")]
    FrameConflict { frame: u64 },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("edit log was made for {expected}, track set is {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("edit {index} failed: {source}")]
    Replay { index: usize, source: Box<AnnotateError> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditAction {
    /// Appends every state of `from_id` to `into_id`.
    Merge { from_id: TrackId, into_id: TrackId },
    /// Moves states at or after `at_frame` to a freshly allocated id.
    Split { id: TrackId, at_frame: u64 },
    Delete { id: TrackId },
    /// Moves the states of `id` in `[from_frame, to_frame]` to `new_id`.
    /// Without `new_id` a fresh id is allocated. If `new_id` exists, the two
    /// tracklets exchange their states in that range.
    Reassign {
        id: TrackId,
        from_frame: u64,
        to_frame: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        new_id: Option<TrackId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    #[serde(flatten)]
    pub action: EditAction,
    #[serde(default)]
    pub author: String,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
}

impl EditOp {
    pub fn new(action: EditAction, author: impl Into<String>) -> Self {
        Self { action, author: author.into(), timestamp: 0 }
    }
}

fn reindex(t: &mut Tracklet) {
    t.states.sort_by_key(|s| s.frame_index);
    t.hits = t.states.iter().filter(|s| s.matched).count() as u32;
}

fn spawn(set: &mut TrackSet, parent: &Tracklet, states: Vec<TrackState>) -> TrackId {
    let id = set.allocate_id();
    let mut t = Tracklet {
        id,
        confirmed_at: parent.confirmed_at.and(states.first().map(|s| s.frame_index)),
        states,
        status: parent.status,
        misses: parent.misses,
        hits: 0,
    };
    reindex(&mut t);
    set.insert(t);
    id
}

/// Applies one edit, returning the edited copy. The input is untouched on
/// error.
pub fn apply_edit(set: &TrackSet, op: &EditOp) -> Result<TrackSet, AnnotateError> {
    let mut out = set.clone();
    match op.action {
        EditAction::Delete { id } => {
            let i = out.tracklets.iter().position(|t| t.id == id).ok_or(AnnotateError::UnknownId(id))?;
            out.tracklets.remove(i);
        }
        EditAction::Merge { from_id, into_id } => {
            if from_id == into_id {
                return Err(AnnotateError::InvalidRange(format!("cannot merge track {from_id} into itself")));
            }
            let from = out.get(from_id).ok_or(AnnotateError::UnknownId(from_id))?.clone();
            let into = out.get(into_id).ok_or(AnnotateError::UnknownId(into_id))?;
            if let Some(s) = from.states.iter().find(|s| into.state_at(s.frame_index).is_some()) {
                return Err(AnnotateError::FrameConflict { frame: s.frame_index });
            }
            let later = from.last_frame() > into.last_frame();
            let into = out.get_mut(into_id).unwrap();
            into.states.extend(from.states);
            into.confirmed_at = match (into.confirmed_at, from.confirmed_at) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
            if later {
                into.status = from.status;
                into.misses = from.misses;
            }
            reindex(into);
            out.tracklets.retain(|t| t.id != from_id);
        }
        EditAction::Split { id, at_frame } => {
            let t = out.get(id).ok_or(AnnotateError::UnknownId(id))?;
            let (first, last) = (t.first_frame().unwrap_or(0), t.last_frame().unwrap_or(0));
            if !(at_frame > first && at_frame <= last) {
                return Err(AnnotateError::InvalidRange(format!("split frame {at_frame} not inside ({first}, {last}] of track {id}")));
            }
            let parent = t.clone();
            let t = out.get_mut(id).unwrap();
            let cut = t.states.partition_point(|s| s.frame_index < at_frame);
            let tail = t.states.split_off(cut);
            t.status = TrackStatus::Terminated;
            t.misses = 0;
            reindex(t);
            spawn(&mut out, &parent, tail);
        }
        EditAction::Reassign { id, from_frame, to_frame, new_id } => {
            if from_frame > to_frame {
                return Err(AnnotateError::InvalidRange(format!("empty range [{from_frame}, {to_frame}]")));
            }
            let in_range = |s: &TrackState| (from_frame..=to_frame).contains(&s.frame_index);
            let source = out.get(id).ok_or(AnnotateError::UnknownId(id))?.clone();
            if !source.states.iter().any(in_range) {
                return Err(AnnotateError::InvalidRange(format!("track {id} has no states in [{from_frame}, {to_frame}]")));
            }
            let (moved, kept): (Vec<_>, Vec<_>) = source.states.iter().cloned().partition(in_range);
            match new_id {
                None => {
                    out.get_mut(id).unwrap().states = kept;
                    spawn(&mut out, &source, moved);
                }
                Some(n) if n == id => return Err(AnnotateError::InvalidRange("reassign target equals source".into())),
                Some(n) => {
                    let target = out.get_mut(n).ok_or(AnnotateError::UnknownId(n))?;
                    let (back, stay): (Vec<_>, Vec<_>) = std::mem::take(&mut target.states).into_iter().partition(in_range);
                    target.states = stay;
                    target.states.extend(moved);
                    if target.confirmed_at.is_none() {
                        target.confirmed_at = source.confirmed_at;
                    }
                    reindex(target);
                    let src = out.get_mut(id).unwrap();
                    src.states = kept;
                    src.states.extend(back);
                }
            }
            if let Some(src) = out.get_mut(id) {
                reindex(src);
            }
            out.tracklets.retain(|t| !t.states.is_empty());
        }
    }
    debug_assert!(out.check_invariants().is_ok());
    Ok(out)
}

/// Ordered edits against a base track set identified by its digest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EditLog {
    pub base_digest: Option<String>,
    pub ops: Vec<EditOp>,
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    base_digest: String,
}

impl EditLog {
    pub fn for_base(base: &TrackSet) -> Self {
        Self { base_digest: Some(base.digest()), ops: Vec::new() }
    }

    /// JSON Lines: an optional `{"base_digest": ...}` header, then one edit
    /// per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if let Some(d) = &self.base_digest {
            out.push_str(&serde_json::to_string(&LogHeader { base_digest: d.clone() }).unwrap());
            out.push('\n');
        }
        for op in &self.ops {
            out.push_str(&serde_json::to_string(op).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str, path: &Path) -> Result<Self, IoError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
        let mut log = EditLog::default();
        if let Some((_, first)) = lines.peek() {
            if let Ok(h) = serde_json::from_str::<LogHeader>(first) {
                log.base_digest = Some(h.base_digest);
                lines.next();
            }
        }
        for (i, l) in lines {
            log.ops.push(serde_json::from_str(l).map_err(|e| IoError::Json { path: path.to_path_buf(), line: i + 1, source: e })?);
        }
        Ok(log)
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e })?;
        Self::parse_jsonl(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e })
    }
}

/// Applies every edit in order. Any failure discards all of them and
/// reports the index of the failing edit.
pub fn replay_edit_log(base: &TrackSet, log: &EditLog) -> Result<TrackSet, AnnotateError> {
    if let Some(expected) = &log.base_digest {
        let actual = base.digest();
        if *expected != actual {
            return Err(AnnotateError::DigestMismatch { expected: expected.clone(), actual });
        }
    }
    let mut set = base.clone();
    for (index, op) in log.ops.iter().enumerate() {
        set = apply_edit(&set, op).map_err(|e| AnnotateError::Replay { index, source: Box::new(e) })?;
    }
    Ok(set)
}

/// Reads tracks and edits, replays, writes the corrected tracks.
pub fn apply_edits_files(tracks: &Path, edits: &Path, out: &Path) -> Result<TrackSet, Box<dyn std::error::Error + Send + Sync>> {
    let base = TrackSet::from_records(&io::read_jsonl(tracks)?)?;
    let log = EditLog::read(edits)?;
    let fixed = replay_edit_log(&base, &log)?;
    io::write_jsonl(out, &fixed.to_records())?;
    Ok(fixed)
}

/// Edits a careful annotator would make given the ground truth: delete
/// tracklets that never match anyone, split tracklets where the matched
/// person changes, then merge the pieces of each person into one id.
pub fn propose_corrections(tracks: &TrackSet, gt: &FramePoints, threshold_mm: f64, author: &str) -> EditLog {
    let mut log = EditLog::for_base(tracks);
    let mut work = tracks.clone();
    let mut push = |work: &mut TrackSet, action: EditAction| -> bool {
        let op = EditOp::new(action, author);
        match apply_edit(work, &op) {
            Ok(next) => {
                *work = next;
                log.ops.push(op);
                true
            }
            Err(_) => false,
        }
    };

    let label: HashMap<(u64, TrackId), TrackId> =
        match_frames(gt, &FramePoints::from_tracks(&work), threshold_mm).into_iter().map(|(f, g, p)| ((f, p), g)).collect();
    let ids: Vec<TrackId> = work.tracklets.iter().filter(|t| t.is_reportable()).map(|t| t.id).collect();

    let mut owner: BTreeMap<TrackId, TrackId> = BTreeMap::new();
    for id in ids {
        let t = work.get(id).unwrap();
        if !t.states.iter().any(|s| label.contains_key(&(s.frame_index, id))) {
            push(&mut work, EditAction::Delete { id });
            continue;
        }
        // walk the tracklet, cutting wherever the matched person changes
        let mut current = id;
        let mut person: Option<TrackId> = None;
        let frames: Vec<u64> = t.states.iter().map(|s| s.frame_index).collect();
        for f in frames {
            let Some(&g) = label.get(&(f, id)) else { continue };
            match person {
                None => person = Some(g),
                Some(p) if p != g => {
                    let before = work.next_id;
                    if push(&mut work, EditAction::Split { id: current, at_frame: f }) {
                        owner.insert(current, p);
                        current = before;
                    }
                    person = Some(g);
                }
                _ => {}
            }
        }
        if let Some(p) = person {
            owner.insert(current, p);
        }
    }

    let mut by_person: BTreeMap<TrackId, Vec<TrackId>> = BTreeMap::new();
    for (t, p) in owner {
        by_person.entry(p).or_default().push(t);
    }
    for pieces in by_person.values() {
        let mut pieces: Vec<(u64, TrackId)> =
            pieces.iter().filter_map(|&id| work.get(id).and_then(|t| t.first_frame()).map(|f| (f, id))).collect();
        pieces.sort();
        if let Some(&(_, keep)) = pieces.first() {
            for &(_, other) in &pieces[1..] {
                push(&mut work, EditAction::Merge { from_id: other, into_id: keep });
            }
        }
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{clear_mot_evaluate, DEFAULT_THRESHOLD_MM};
    use crate::track::TrackRecord;

    fn line(id: TrackId, y: f64, frames: std::ops::Range<u64>) -> Vec<TrackRecord> {
        frames.map(|f| TrackRecord { frame: f, id, x_mm: f as f64 * 100.0, y_mm: y, h_mm: 1700.0, score: 1.0 }).collect()
    }

    fn set(recs: &[Vec<TrackRecord>]) -> TrackSet {
        TrackSet::from_records(&recs.concat()).unwrap()
    }

    fn op(a: EditAction) -> EditOp {
        EditOp::new(a, "test")
    }

    #[test]
    fn delete_unknown_id() {
        let s = set(&[line(1, 0.0, 0..5)]);
        assert_eq!(apply_edit(&s, &op(EditAction::Delete { id: 99 })), Err(AnnotateError::UnknownId(99)));
        let d = apply_edit(&s, &op(EditAction::Delete { id: 1 })).unwrap();
        assert_eq!(d.state_count(), 0);
    }

    #[test]
    fn merge_conserves_states() {
        let s = set(&[line(1, 0.0, 0..5), line(2, 0.0, 5..9)]);
        let m = apply_edit(&s, &op(EditAction::Merge { from_id: 2, into_id: 1 })).unwrap();
        assert_eq!(m.tracklets.len(), s.tracklets.len() - 1);
        assert_eq!(m.state_count(), s.state_count());
        assert_eq!(m.get(1).unwrap().states.len(), 9);
        m.check_invariants().unwrap();
    }

    #[test]
    fn merge_overlap_conflicts() {
        let s = set(&[line(1, 0.0, 0..5), line(2, 0.0, 4..9)]);
        assert_eq!(apply_edit(&s, &op(EditAction::Merge { from_id: 2, into_id: 1 })), Err(AnnotateError::FrameConflict { frame: 4 }));
    }

    #[test]
    fn split_allocates_fresh_id() {
        let s = set(&[line(1, 0.0, 0..10), line(4, 0.0, 0..3)]);
        let out = apply_edit(&s, &op(EditAction::Split { id: 1, at_frame: 6 })).unwrap();
        assert_eq!(out.get(5).unwrap().first_frame(), Some(6));
        assert_eq!(out.get(1).unwrap().last_frame(), Some(5));
        assert_eq!(out.next_id, 6);
        for bad in [0, 11] {
            assert!(matches!(apply_edit(&s, &op(EditAction::Split { id: 1, at_frame: bad })), Err(AnnotateError::InvalidRange(_))));
        }
    }

    #[test]
    fn reassign_moves_and_exchanges() {
        let s = set(&[line(1, 0.0, 0..10), line(2, 3000.0, 0..10)]);
        let moved = apply_edit(&s, &op(EditAction::Reassign { id: 1, from_frame: 2, to_frame: 4, new_id: None })).unwrap();
        assert_eq!(moved.get(3).unwrap().states.len(), 3);
        assert_eq!(moved.state_count(), 20);
        let swapped = apply_edit(&s, &op(EditAction::Reassign { id: 1, from_frame: 6, to_frame: 9, new_id: Some(2) })).unwrap();
        assert_eq!(swapped.get(1).unwrap().state_at(7).unwrap().world_xy[1], 3000.0);
        assert_eq!(swapped.get(2).unwrap().state_at(7).unwrap().world_xy[1], 0.0);
        let empty = EditAction::Reassign { id: 1, from_frame: 5, to_frame: 4, new_id: None };
        assert!(matches!(apply_edit(&s, &op(empty)), Err(AnnotateError::InvalidRange(_))));
    }

    #[test]
    fn one_reassign_repairs_a_swap() {
        let gt = set(&[line(1, 0.0, 0..10), line(2, 3000.0, 0..10)]);
        let mut a = line(11, 0.0, 0..6);
        a.extend(line(11, 3000.0, 6..10));
        let mut b = line(12, 3000.0, 0..6);
        b.extend(line(12, 0.0, 6..10));
        let pred = set(&[a, b]);
        let gtp = FramePoints::from_tracks(&gt);
        assert_eq!(clear_mot_evaluate(&gtp, &FramePoints::from_tracks(&pred), DEFAULT_THRESHOLD_MM).unwrap().ids, 2);
        let fixed = apply_edit(&pred, &op(EditAction::Reassign { id: 11, from_frame: 6, to_frame: 9, new_id: Some(12) })).unwrap();
        assert_eq!(clear_mot_evaluate(&gtp, &FramePoints::from_tracks(&fixed), DEFAULT_THRESHOLD_MM).unwrap().ids, 0);
    }

    #[test]
    fn replay_matches_manual_application() {
        let s = set(&[line(1, 0.0, 0..10), line(2, 3000.0, 0..10)]);
        let mut log = EditLog::for_base(&s);
        log.ops.push(op(EditAction::Split { id: 1, at_frame: 5 }));
        log.ops.push(op(EditAction::Merge { from_id: 3, into_id: 1 }));
        let manual = apply_edit(&apply_edit(&s, &log.ops[0]).unwrap(), &log.ops[1]).unwrap();
        assert_eq!(replay_edit_log(&s, &log).unwrap(), manual);
        assert_eq!(replay_edit_log(&s, &EditLog::default()).unwrap(), s);
    }

    #[test]
    fn replay_fails_atomically_with_index() {
        let s = set(&[line(1, 0.0, 0..10)]);
        let mut log = EditLog::for_base(&s);
        log.ops.push(op(EditAction::Split { id: 1, at_frame: 5 }));
        log.ops.push(op(EditAction::Delete { id: 42 }));
        let err = replay_edit_log(&s, &log).unwrap_err();
        assert_eq!(err, AnnotateError::Replay { index: 1, source: Box::new(AnnotateError::UnknownId(42)) });
        log.base_digest = Some("00".into());
        assert!(matches!(replay_edit_log(&s, &log), Err(AnnotateError::DigestMismatch { .. })));
    }

    #[test]
    fn log_jsonl_roundtrip() {
        let s = set(&[line(1, 0.0, 0..3)]);
        let mut log = EditLog::for_base(&s);
        log.ops.push(EditOp { action: EditAction::Reassign { id: 1, from_frame: 0, to_frame: 1, new_id: None }, author: "ann".into(), timestamp: 5 });
        log.ops.push(op(EditAction::Delete { id: 1 }));
        let text = log.to_jsonl();
        assert!(text.lines().nth(1).unwrap().contains("\"op\":\"reassign\""));
        assert_eq!(EditLog::parse_jsonl(&text, Path::new("x")).unwrap(), log);
        let bare = EditLog::parse_jsonl("{\"op\":\"delete\",\"id\":3}\n", Path::new("x")).unwrap();
        assert_eq!(bare.base_digest, None);
        assert_eq!(bare.ops[0].action, EditAction::Delete { id: 3 });
    }

    #[test]
    fn proposed_corrections_fix_swaps_and_false_tracks() {
        let gt = set(&[line(1, 0.0, 0..20), line(2, 3000.0, 0..20)]);
        let mut a = line(1, 0.0, 0..8);
        a.extend(line(1, 3000.0, 8..20));
        let mut b = line(2, 3000.0, 0..8);
        b.extend(line(2, 0.0, 8..20));
        let ghost = line(3, -9000.0, 4..9);
        let pred = set(&[a, b, ghost]);
        let gtp = FramePoints::from_tracks(&gt);
        let log = propose_corrections(&pred, &gtp, DEFAULT_THRESHOLD_MM, "oracle");
        let fixed = replay_edit_log(&pred, &log).unwrap();
        let m = clear_mot_evaluate(&gtp, &FramePoints::from_tracks(&fixed), DEFAULT_THRESHOLD_MM).unwrap();
        assert_eq!((m.ids, m.fp, m.fn_), (0, 0, 0));
    }
}
