use std::collections::BTreeMap;

use autolabel::annotate::{apply_edit, replay_edit_log, EditAction, EditLog, EditOp};
use autolabel::calibration::{calibrate, CalibrationGraph, MarkerObservation, SolverOptions, DEFAULT_MARKER_SIDE_MM};
use autolabel::detect::Detection;
use autolabel::geometry::{CameraIntrinsics, Pose};
use autolabel::metrics::{evaluate, FramePoints, DEFAULT_THRESHOLD_MM};
use autolabel::simulate::{corner_rig, generate_scene, synth_marker_observations, zoned_scene_spec};
use autolabel::track::{tracker_step_observed, Observation, TrackRecord, TrackSet, TrackStatus, TrackerParams};
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

/// Up to `n` tracks over frames `0..frames`, each present on a random
/// contiguous span with some holes.
fn track_records(n: usize, frames: u64) -> impl Strategy<Value = Vec<TrackRecord>> {
    prop::collection::vec((0..frames, 1..frames, prop::collection::vec(any::<bool>(), frames as usize), -3000.0..3000.0f64), 1..=n).prop_map(
        move |specs| {
            let mut out = Vec::new();
            for (i, (start, len, keep, y)) in specs.into_iter().enumerate() {
                for f in start..(start + len).min(frames) {
                    if keep[f as usize] || f == start {
                        out.push(TrackRecord { frame: f, id: i as u64 + 1, x_mm: 50.0 * f as f64, y_mm: y, h_mm: 1700.0, score: 1.0 });
                    }
                }
            }
            out
        },
    )
}

fn edit_action(max_id: u64, frames: u64) -> impl Strategy<Value = EditAction> {
    let id = 1..=max_id + 1;
    prop_oneof![
        (id.clone(), id.clone()).prop_map(|(from_id, into_id)| EditAction::Merge { from_id, into_id }),
        (id.clone(), 0..frames).prop_map(|(id, at_frame)| EditAction::Split { id, at_frame }),
        id.clone().prop_map(|id| EditAction::Delete { id }),
        (id.clone(), 0..frames, 0..frames, prop::option::of(1..=max_id + 3)).prop_map(|(id, a, b, new_id)| EditAction::Reassign {
            id,
            from_frame: a.min(b),
            to_frame: a.max(b),
            new_id
        }),
    ]
}

fn positions(set: &TrackSet) -> Vec<(u64, [u64; 2])> {
    let mut v: Vec<_> = set.tracklets.iter().flat_map(|t| t.states.iter().map(|s| (s.frame_index, s.world_xy.map(f64::to_bits)))).collect();
    v.sort();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn edits_keep_invariants_and_conserve_states(
        recs in track_records(5, 30),
        actions in prop::collection::vec(edit_action(5, 30), 1..12),
    ) {
        let mut set = TrackSet::from_records(&recs).unwrap();
        for a in actions {
            let op = EditOp { action: a.clone(), author: "p".into(), timestamp: 1 };
            match apply_edit(&set, &op) {
                Ok(next) => {
                    next.check_invariants().unwrap();
                    prop_assert!(next.tracklets.iter().all(|t| !t.states.is_empty()));
                    match a {
                        EditAction::Delete { id } => {
                            let gone = set.get(id).unwrap().states.len();
                            prop_assert_eq!(next.state_count() + gone, set.state_count());
                            prop_assert!(next.get(id).is_none());
                        }
                        _ => prop_assert_eq!(positions(&next), positions(&set)),
                    }
                    prop_assert!(next.next_id >= set.next_id);
                    set = next;
                }
                Err(_) => {}
            }
        }
    }

    #[test]
    fn replay_is_all_or_nothing(
        recs in track_records(4, 20),
        actions in prop::collection::vec(edit_action(4, 20), 1..8),
    ) {
        let base = TrackSet::from_records(&recs).unwrap();
        let log = EditLog { base_digest: Some(base.digest()), ops: actions.into_iter().map(|a| EditOp { action: a, author: "p".into(), timestamp: 1 }).collect() };
        // manual application up to the first failure
        let mut manual = Ok(base.clone());
        for op in &log.ops {
            manual = manual.and_then(|s| apply_edit(&s, op));
        }
        let replayed = replay_edit_log(&base, &log);
        prop_assert_eq!(manual.is_ok(), replayed.is_ok());
        if let (Ok(a), Ok(b)) = (manual, replayed) {
            prop_assert_eq!(a.digest(), b.digest());
        }
    }

    #[test]
    fn records_round_trip(recs in track_records(6, 25)) {
        let set = TrackSet::from_records(&recs).unwrap();
        let back = TrackSet::from_records(&set.to_records()).unwrap();
        prop_assert_eq!(back.digest(), set.digest());
    }

    #[test]
    fn metrics_are_bounded_and_label_invariant(gt in track_records(4, 20), pred in track_records(5, 20), k in 1u64..50) {
        let (g, p) = (FramePoints::from_records(&gt), FramePoints::from_records(&pred));
        let r = evaluate(&g, &p, DEFAULT_THRESHOLD_MM).unwrap();
        prop_assert!(r.idf1 >= 0.0 && r.idf1 <= 100.0);
        prop_assert!(r.mota <= 100.0);
        prop_assert!(r.fn_ <= r.gt_total);
        let relabeled = evaluate(&g.relabeled(|i| i * 3 + k), &p.relabeled(|i| 1000 - i), DEFAULT_THRESHOLD_MM).unwrap();
        prop_assert_eq!(r, relabeled);
        let perfect = evaluate(&g, &g, DEFAULT_THRESHOLD_MM).unwrap();
        prop_assert_eq!((perfect.idf1, perfect.mota, perfect.ids), (100.0, 100.0, 0));
    }

    #[test]
    fn tracker_output_is_well_formed(
        frames in prop::collection::vec(prop::collection::vec((-3000.0..3000.0f64, -3000.0..3000.0f64, 0.0..1.0f64), 0..5), 1..40),
    ) {
        let params = TrackerParams::default();
        let mut set = TrackSet::new();
        for (f, dets) in frames.iter().enumerate() {
            let obs: Vec<Observation> = dets
                .iter()
                .map(|&(x, y, score)| Observation {
                    detection: Detection { cell: (0, 0), world_xy: [x, y], score, peak_value: 80 },
                    height_mm: 1700.0,
                    histogram: None,
                })
                .collect();
            tracker_step_observed(&mut set, f as u64, &obs, &params).unwrap();
            set.check_invariants().unwrap();
            // every state comes from a detection of its frame
            for t in &set.tracklets {
                if let Some(s) = t.states.iter().find(|s| s.frame_index == f as u64) {
                    prop_assert!(dets.iter().any(|d| d.0 == s.world_xy[0] && d.1 == s.world_xy[1]));
                }
            }
            // a detection feeds at most one tracklet
            let used: Vec<_> = set.tracklets.iter().filter_map(|t| t.state_at(f as u64)).map(|s| s.world_xy.map(f64::to_bits)).collect();
            let mut dedup = used.clone();
            dedup.sort();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), used.len());
        }
        for t in &set.tracklets {
            if t.status == TrackStatus::Candidate {
                prop_assert!(t.confirmed_at.is_none());
            }
            if t.is_reportable() {
                prop_assert!(t.hits >= params.confirm_hits);
            }
        }
    }

    #[test]
    fn pose_inverse_and_compose(ax in -3.0..3.0f64, ay in -3.0..3.0f64, az in -3.0..3.0f64, t in prop::array::uniform3(-5000.0..5000.0f64), p in prop::array::uniform3(-5000.0..5000.0f64)) {
        let pose = Pose::new(UnitQuaternion::from_scaled_axis(Vector3::new(ax, ay, az)), Vector3::from(t));
        let x = Vector3::from(p);
        let back = pose.inverse().transform(&pose.transform(&x));
        prop_assert!((back - x).norm() <= 1e-9 * (1.0 + x.norm()));
        let id = pose.compose(&pose.inverse());
        prop_assert!(id.transform(&x).metric_distance(&x) <= 1e-8 * (1.0 + x.norm()));
    }
}

fn calib_graph(obs: &[MarkerObservation], scene: &autolabel::simulate::Scene) -> CalibrationGraph {
    let cams: BTreeMap<_, _> = scene.spec.cameras.iter().map(|c| (c.id, c.intrinsics)).collect();
    CalibrationGraph::new(cams, obs, 0, DEFAULT_MARKER_SIDE_MM).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn calibration_ignores_observation_order(seed in 0u64..1000, rot in 0usize..96) {
        let mut spec = zoned_scene_spec(1, 1.0, seed);
        spec.cameras = corner_rig(CameraIntrinsics::new(600.0, 600.0, 639.5, 359.5, 1280, 720).unwrap(), 3000.0);
        let scene = generate_scene(&spec).unwrap();
        let mut obs = synth_marker_observations(&scene, 0.5, seed);
        let a = calibrate(&calib_graph(&obs, &scene), &SolverOptions::default()).unwrap();
        let n = obs.len();
        obs.rotate_left(rot % n);
        obs.reverse();
        let b = calibrate(&calib_graph(&obs, &scene), &SolverOptions::default()).unwrap();
        prop_assert_eq!(a.rms_px, b.rms_px);
        prop_assert_eq!(a.poses, b.poses);
        let mut last = f64::INFINITY;
        for c in &a.cost_history {
            prop_assert!(*c <= last);
            last = *c;
        }
    }
}
