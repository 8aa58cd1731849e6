//! Drives the review API in-process: lists sequences, posts an edit with
//! a digest precondition, and reads metrics and the edit log back.
//!
//! cargo run --release --example review_service

use autolabel::annotate::service::{router, AppState, GT_FILE, TRACKS_FILE};
use autolabel::io;
use autolabel::simulate::{corrupt_tracks, generate_scene, zoned_scene_spec};
use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use tower::ServiceExt;

async fn call(app: &axum::Router, req: Request<Body>) -> Result<(u16, String), Box<dyn std::error::Error>> {
    let resp = app.clone().oneshot(req).await?;
    let status = resp.status().as_u16();
    let body = resp.into_body().collect().await?.to_bytes();
    Ok((status, String::from_utf8_lossy(&body).into_owned()))
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = tempfile::tempdir()?;
    let seq = data.path().join("hall");
    let scene = generate_scene(&zoned_scene_spec(2, 4.0, 5))?;
    let damaged = corrupt_tracks(&scene.ground_truth, &scene.spec.bounds, 0, 1, 5);
    io::write_jsonl(&seq.join(TRACKS_FILE), &damaged.to_records())?;
    io::write_jsonl(&seq.join(GT_FILE), &scene.ground_truth.to_records())?;

    let app = router(AppState::scan(data.path()).map_err(|e| e.to_string())?);
    let get = |uri: &str| Request::get(uri).body(Body::empty()).unwrap();
    let (_, listing) = call(&app, get("/sequences")).await?;
    println!("{listing}");
    // the digest is of the server's copy, so read it from the listing
    let listing: serde_json::Value = serde_json::from_str(&listing)?;
    let digest = listing[0]["digest"].as_str().unwrap_or_default().to_string();
    println!("{:?}", call(&app, get("/sequences/hall/metrics?gt=gt.jsonl")).await?);

    let ghost = damaged.tracklets.iter().map(|t| t.id).max().unwrap();
    let edit = serde_json::json!({
        "op": "delete", "id": ghost, "author": "reviewer", "timestamp": 0,
        "expected_digest": digest,
    });
    let post = Request::post("/sequences/hall/edits").header("content-type", "application/json").body(Body::from(edit.to_string()))?;
    println!("{:?}", call(&app, post).await?);
    println!("{:?}", call(&app, get("/sequences/hall/metrics?gt=gt.jsonl")).await?);
    println!("{:?}", call(&app, get("/sequences/hall/editlog")).await?);
    Ok(())
}
