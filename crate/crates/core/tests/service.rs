use std::path::Path;

use autolabel::annotate::service::{router, AppState, EDITS_FILE, GT_FILE, TRACKS_FILE};
use autolabel::io;
use autolabel::metrics::MotReport;
use autolabel::simulate::{corrupt_tracks, export_scene, generate_scene, zoned_scene_spec, ExportOptions, Scene};
use autolabel::track::{TrackRecord, TrackSet};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn scene() -> Scene {
    generate_scene(&zoned_scene_spec(2, 3.0, 5)).unwrap()
}

/// A sequence with one ghost tracklet (the highest id) and one tail swap.
fn seed_sequence(dir: &Path, scene: &Scene) -> TrackSet {
    let damaged = corrupt_tracks(&scene.ground_truth, &scene.spec.bounds, 1, 1, 5);
    io::write_jsonl(&dir.join(TRACKS_FILE), &damaged.to_records()).unwrap();
    io::write_jsonl(&dir.join(GT_FILE), &scene.ground_truth.to_records()).unwrap();
    damaged
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn digest(app: &Router) -> String {
    get_json(app, "/sequences").await.1[0]["digest"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn lists_sequences_and_filters_tracks_by_frame() {
    let data = tempfile::tempdir().unwrap();
    let dir = data.path().join("lab");
    let damaged = seed_sequence(&dir, &scene());
    let app = router(AppState::scan(data.path()).unwrap());

    let (s, list) = get_json(&app, "/sequences").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["name"], "lab");
    assert_eq!(list[0]["tracks"], damaged.tracklets.len());
    assert_eq!(list[0]["first_frame"], 0);

    let (s, body) = get_json(&app, "/sequences/lab/tracks?from=10&to=12").await;
    assert_eq!(s, StatusCode::OK);
    let recs: Vec<TrackRecord> = serde_json::from_value(body).unwrap();
    assert!(!recs.is_empty());
    assert!(recs.iter().all(|r| (10..=12).contains(&r.frame)));
    let expected = damaged.to_records().into_iter().filter(|r| (10..=12).contains(&r.frame)).count();
    assert_eq!(recs.len(), expected);
}

#[tokio::test]
async fn unknown_sequence_is_404() {
    let data = tempfile::tempdir().unwrap();
    seed_sequence(&data.path().join("lab"), &scene());
    let app = router(AppState::scan(data.path()).unwrap());
    assert_eq!(get_json(&app, "/sequences/nope/tracks").await.0, StatusCode::NOT_FOUND);
    assert_eq!(post_json(&app, "/sequences/nope/edits", json!({"op": "delete", "id": 1, "author": "a", "timestamp": 1})).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn edits_fix_metrics_and_persist_across_restart() {
    let data = tempfile::tempdir().unwrap();
    let dir = data.path().join("lab");
    let sc = scene();
    let damaged = seed_sequence(&dir, &sc);
    let app = router(AppState::scan(data.path()).unwrap());

    let (_, before) = get_json(&app, "/sequences/lab/metrics").await;
    let before: MotReport = serde_json::from_value(before).unwrap();
    assert!(before.fp > 0);
    assert!(before.ids > 0);

    let ghost = damaged.tracklets.iter().map(|t| t.id).max().unwrap();
    let d0 = digest(&app).await;
    let (s, resp) = post_json(&app, "/sequences/lab/edits", json!({"op": "delete", "id": ghost, "author": "rev", "timestamp": 0, "expected_digest": d0})).await;
    assert_eq!(s, StatusCode::OK, "{resp}");
    assert_eq!(resp["index"], 0);

    // Repair the swap: find the frame where GT id 1 stops matching pred id 1.
    let pred = TrackSet::from_records(&serde_json::from_value::<Vec<TrackRecord>>(get_json(&app, "/sequences/lab/tracks").await.1).unwrap()).unwrap();
    let t1 = sc.ground_truth.get(1).unwrap();
    let swap_at = pred
        .get(1)
        .unwrap()
        .states
        .iter()
        .find(|s| {
            let g = t1.state_at(s.frame_index).unwrap();
            (g.world_xy[0] - s.world_xy[0]).hypot(g.world_xy[1] - s.world_xy[1]) > 1.0
        })
        .map(|s| s.frame_index)
        .expect("swap present");
    let last = pred.tracklets.iter().filter_map(|t| t.last_frame()).max().unwrap();
    let (s, resp) = post_json(
        &app,
        "/sequences/lab/edits",
        json!({"op": "reassign", "id": 1, "from_frame": swap_at, "to_frame": last, "new_id": 2, "author": "rev", "timestamp": 0}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{resp}");

    let (_, after) = get_json(&app, "/sequences/lab/metrics?gt=gt.jsonl").await;
    let after: MotReport = serde_json::from_value(after).unwrap();
    assert_eq!((after.fp, after.ids), (0, 0));

    let (_, log) = get_json(&app, "/sequences/lab/editlog").await;
    assert_eq!(log["ops"].as_array().unwrap().len(), 2);
    assert!(log["ops"][0]["timestamp"].as_u64().unwrap() > 0);
    assert!(dir.join(EDITS_FILE).exists());

    let final_digest = digest(&app).await;
    let restarted = router(AppState::scan(data.path()).unwrap());
    assert_eq!(digest(&restarted).await, final_digest);
    let (_, again) = get_json(&restarted, "/sequences/lab/metrics").await;
    assert_eq!(serde_json::from_value::<MotReport>(again).unwrap(), after);
}

#[tokio::test]
async fn stale_digest_is_409_and_bad_edit_is_422() {
    let data = tempfile::tempdir().unwrap();
    seed_sequence(&data.path().join("lab"), &scene());
    let app = router(AppState::scan(data.path()).unwrap());
    let d0 = digest(&app).await;

    let (s, _) = post_json(&app, "/sequences/lab/edits", json!({"op": "delete", "id": 1, "author": "a", "timestamp": 1, "expected_digest": "0".repeat(64)})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = post_json(&app, "/sequences/lab/edits", json!({"op": "delete", "id": 4242, "author": "a", "timestamp": 1})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post_json(&app, "/sequences/lab/edits", json!({"op": "merge", "from_id": 1, "into_id": 2, "author": "a", "timestamp": 1})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "overlapping tracklets cannot merge");

    // rejected edits change nothing
    assert_eq!(digest(&app).await, d0);
    assert_eq!(get_json(&app, "/sequences/lab/editlog").await.1["ops"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn concurrent_posts_with_same_digest_admit_one() {
    let data = tempfile::tempdir().unwrap();
    let damaged = seed_sequence(&data.path().join("lab"), &scene());
    let app = router(AppState::scan(data.path()).unwrap());
    let d0 = digest(&app).await;
    let ghost = damaged.tracklets.iter().map(|t| t.id).max().unwrap();
    let body = |id: u64| json!({"op": "delete", "id": id, "author": "a", "timestamp": 1, "expected_digest": d0});
    let (a, b) = tokio::join!(post_json(&app, "/sequences/lab/edits", body(ghost)), post_json(&app, "/sequences/lab/edits", body(1)));
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
}

#[tokio::test]
async fn metrics_rejects_paths_and_missing_gt() {
    let data = tempfile::tempdir().unwrap();
    seed_sequence(&data.path().join("lab"), &scene());
    let app = router(AppState::scan(data.path()).unwrap());
    assert_eq!(get_json(&app, "/sequences/lab/metrics?gt=../lab/gt.jsonl").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get_json(&app, "/sequences/lab/metrics?gt=other.jsonl").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn topdown_is_png_with_and_without_depth() {
    let data = tempfile::tempdir().unwrap();
    let sc = generate_scene(&zoned_scene_spec(2, 0.4, 5)).unwrap();
    let with_depth = data.path().join("rendered");
    export_scene(&sc, &with_depth, &ExportOptions { noise_sigma_mm: 0.0, with_color: false, marker_noise_px: 0.0 }).unwrap();
    io::write_jsonl(&with_depth.join(TRACKS_FILE), &sc.ground_truth.to_records()).unwrap();
    seed_sequence(&data.path().join("bare"), &sc);
    let app = router(AppState::scan(data.path()).unwrap());

    for seq in ["rendered", "bare"] {
        let (s, bytes) = send(&app, Request::get(format!("/sequences/{seq}/frames/2/topdown")).body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::OK);
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).unwrap().to_rgb8();
        assert!(img.width() > 0 && img.height() > 0);
        if seq == "rendered" {
            // a real heightmap has non-black cells besides the track markers
            assert!(img.pixels().any(|p| p.0[0] == p.0[1] && p.0[1] == p.0[2] && p.0[0] > 0));
        }
    }
}
