//! HTTP review service.
//!
//! Each sequence is a directory holding `tracks.jsonl` and optionally
//! `gt.jsonl`, `calib.json` and `depth/`. Accepted edits are appended to
//! `edits.jsonl` in the same directory and replayed on startup.
//!
//! Routes:
//! - `GET /sequences`
//! - `GET /sequences/{s}/frames/{n}/topdown` (PNG)
//! - `GET /sequences/{s}/tracks?from=&to=`
//! - `POST /sequences/{s}/edits`
//! - `GET /sequences/{s}/metrics?gt=`
//! - `GET /sequences/{s}/editlog`

use std::collections::BTreeMap;
use std::io::{Cursor, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

use super::{apply_edit, replay_edit_log, AnnotateError, EditLog, EditOp};
use crate::fusion::{topdown_heightmap, FusionParams, Reconstructor, TopDownMap, VoxelGrid};
use crate::geometry::CameraModel;
use crate::io::{self, IoError};
use crate::metrics::{evaluate, FramePoints, MotReport, DEFAULT_THRESHOLD_MM};
use crate::pipeline::{stream_lengths, GridConfig};
use crate::track::{TrackRecord, TrackSet};

pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const EDITS_FILE: &str = "edits.jsonl";
pub const GT_FILE: &str = "gt.jsonl";

pub struct Sequence {
    pub name: String,
    pub dir: PathBuf,
    pub base: TrackSet,
    pub current: TrackSet,
    pub log: EditLog,
}

impl Sequence {
    /// Loads tracks and replays any persisted edits.
    pub fn open(name: &str, dir: &Path) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let base = TrackSet::from_records(&io::read_jsonl(&dir.join(TRACKS_FILE))?)?;
        let edits = dir.join(EDITS_FILE);
        let log = if edits.exists() { EditLog::read(&edits)? } else { EditLog::for_base(&base) };
        let current = replay_edit_log(&base, &log)?;
        Ok(Self { name: name.to_string(), dir: dir.to_path_buf(), base, current, log })
    }

    fn frame_range(&self) -> Option<(u64, u64)> {
        let frames = self.current.tracklets.iter().chain(&self.base.tracklets);
        let lo = frames.clone().filter_map(|t| t.first_frame()).min()?;
        let hi = frames.filter_map(|t| t.last_frame()).max()?;
        Some((lo, hi))
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    pub sequences: Arc<BTreeMap<String, Arc<RwLock<Sequence>>>>,
}

impl AppState {
    /// Every subdirectory of `data` with a `tracks.jsonl` becomes a
    /// sequence named after it; `data` itself counts too.
    pub fn scan(data: &Path) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let mut map = BTreeMap::new();
        let mut add = |name: String, dir: &Path| -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
            if dir.join(TRACKS_FILE).exists() {
                map.insert(name.clone(), Arc::new(RwLock::new(Sequence::open(&name, dir)?)));
            }
            Ok(())
        };
        let own = data.file_name().map_or("root".to_string(), |n| n.to_string_lossy().into_owned());
        add(own, data)?;
        let mut entries: Vec<_> = std::fs::read_dir(data)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
        entries.sort();
        for dir in entries {
            let name = dir.file_name().unwrap().to_string_lossy().into_owned();
            add(name, &dir)?;
        }
        Ok(Self { sequences: Arc::new(map) })
    }

    fn get(&self, name: &str) -> Result<Arc<RwLock<Sequence>>, ApiError> {
        self.sequences.get(name).cloned().ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown sequence {name}")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sequences", get(list_sequences))
        .route("/sequences/{s}/frames/{n}/topdown", get(topdown))
        .route("/sequences/{s}/tracks", get(tracks))
        .route("/sequences/{s}/edits", post(post_edit))
        .route("/sequences/{s}/metrics", get(metrics))
        .route("/sequences/{s}/editlog", get(editlog))
        .with_state(state)
}

pub async fn serve(data: &Path, port: u16) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let state = AppState::scan(data)?;
    log::info!("serving {} sequences on port {port}", state.sequences.len());
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<AnnotateError> for ApiError {
    fn from(e: AnnotateError) -> Self {
        let code = match e {
            AnnotateError::DigestMismatch { .. } => StatusCode::CONFLICT,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(code, e.to_string())
    }
}

impl From<IoError> for ApiError {
    fn from(e: IoError) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub name: String,
    pub first_frame: Option<u64>,
    pub last_frame: Option<u64>,
    pub tracks: usize,
    pub edits: usize,
    pub digest: String,
}

async fn list_sequences(State(state): State<AppState>) -> Json<Vec<SequenceSummary>> {
    let mut out = Vec::new();
    for seq in state.sequences.values() {
        let s = seq.read().await;
        let range = s.frame_range();
        out.push(SequenceSummary {
            name: s.name.clone(),
            first_frame: range.map(|r| r.0),
            last_frame: range.map(|r| r.1),
            tracks: s.current.tracklets.iter().filter(|t| t.is_reportable()).count(),
            edits: s.log.ops.len(),
            digest: s.current.digest(),
        });
    }
    Json(out)
}

#[derive(Debug, Deserialize)]
pub struct FrameRange {
    pub from: Option<u64>,
    pub to: Option<u64>,
}

async fn tracks(State(state): State<AppState>, UrlPath(s): UrlPath<String>, Query(q): Query<FrameRange>) -> Result<Json<Vec<TrackRecord>>, ApiError> {
    let seq = state.get(&s)?;
    let seq = seq.read().await;
    let lo = q.from.unwrap_or(0);
    let hi = q.to.unwrap_or(u64::MAX);
    Ok(Json(seq.current.to_records().into_iter().filter(|r| (lo..=hi).contains(&r.frame)).collect()))
}

/// An edit plus the digest the client last saw, if it wants the check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditRequest {
    #[serde(flatten)]
    pub op: EditOp,
    #[serde(default)]
    pub expected_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub digest: String,
    pub index: usize,
    pub next_id: u64,
}

async fn post_edit(State(state): State<AppState>, UrlPath(s): UrlPath<String>, Json(req): Json<EditRequest>) -> Result<Json<EditResponse>, ApiError> {
    let seq = state.get(&s)?;
    let mut seq = seq.write().await;
    if let Some(expected) = &req.expected_digest {
        let actual = seq.current.digest();
        if *expected != actual {
            return Err(AnnotateError::DigestMismatch { expected: expected.clone(), actual }.into());
        }
    }
    let mut op = req.op;
    if op.timestamp == 0 {
        op.timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
    }
    let next = apply_edit(&seq.current, &op)?;
    // persist before publishing so a failed write leaves the state unchanged
    let path = seq.dir.join(EDITS_FILE);
    let mut text = String::new();
    if !path.exists() || seq.log.ops.is_empty() {
        let mut fresh = seq.log.clone();
        fresh.ops.push(op.clone());
        text = fresh.to_jsonl();
        std::fs::write(&path, text.as_bytes()).map_err(|e| IoError::Io { path: path.clone(), source: e })?;
    } else {
        text.push_str(&serde_json::to_string(&op).expect("edit serializes"));
        text.push('\n');
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).map_err(|e| IoError::Io { path: path.clone(), source: e })?;
        f.write_all(text.as_bytes()).map_err(|e| IoError::Io { path: path.clone(), source: e })?;
    }
    seq.log.ops.push(op);
    seq.current = next;
    Ok(Json(EditResponse { digest: seq.current.digest(), index: seq.log.ops.len() - 1, next_id: seq.current.next_id }))
}

async fn editlog(State(state): State<AppState>, UrlPath(s): UrlPath<String>) -> Result<Json<EditLog>, ApiError> {
    let seq = state.get(&s)?;
    let log = seq.read().await.log.clone();
    Ok(Json(log))
}

#[derive(Debug, Deserialize)]
pub struct MetricsQuery {
    pub gt: Option<String>,
    pub threshold_mm: Option<f64>,
}

async fn metrics(State(state): State<AppState>, UrlPath(s): UrlPath<String>, Query(q): Query<MetricsQuery>) -> Result<Json<MotReport>, ApiError> {
    let seq = state.get(&s)?;
    let seq = seq.read().await;
    let name = q.gt.unwrap_or_else(|| GT_FILE.to_string());
    // only plain file names inside the sequence directory
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("invalid ground-truth name {name:?}")));
    }
    let path = seq.dir.join(&name);
    if !path.exists() {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("no ground truth {name}")));
    }
    let gt: Vec<TrackRecord> = io::read_jsonl(&path)?;
    let report = evaluate(&FramePoints::from_records(&gt), &FramePoints::from_tracks(&seq.current), q.threshold_mm.unwrap_or(DEFAULT_THRESHOLD_MM))
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok(Json(report))
}

/// Heightmap for one frame from the sequence's own depth data, if any.
fn load_heightmap(dir: &Path, frame: u64) -> Option<TopDownMap> {
    let rig: Vec<CameraModel> = io::read_calibration(&dir.join("calib.json")).ok()?;
    let depth = dir.join("depth");
    let (fps, lengths) = stream_lengths(&depth, &rig).ok()?;
    if lengths.values().any(|&n| frame >= n) || lengths.is_empty() {
        return None;
    }
    let frames = lengths.keys().map(|&c| io::read_depth_frame(&depth, c, frame, fps)).collect::<Result<Vec<_>, _>>().ok()?;
    let fusion = FusionParams::default();
    let spec = GridConfig::default().resolve(&rig, &fusion).ok()?;
    let cloud = Reconstructor::new(&rig, fusion).reconstruct(&frames).ok()?;
    let mut grid = VoxelGrid::new(spec).ok()?;
    for p in &cloud.points {
        grid.insert(p);
    }
    Some(topdown_heightmap(&grid))
}

fn id_color(id: u64) -> [u8; 3] {
    let h = id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    [(h >> 16) as u8 | 0x40, (h >> 32) as u8 | 0x40, (h >> 48) as u8 | 0x40]
}

/// Grayscale heightmap (brighter is taller) with a colored square on each
/// track position. Image column is the x cell, image row counts down from
/// the largest y cell.
pub fn render_topdown(map: &TopDownMap, records: &[TrackRecord]) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (w, h) = (map.nx as u32, map.ny as u32);
    let top = map.values.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = ImageBuffer::from_fn(w, h, |x, y| {
        let v = map.get(x as usize, (h - 1 - y) as usize) as f64;
        let g = (v / top * 255.0).round() as u8;
        Rgb([g, g, g])
    });
    for r in records {
        let c = map.ground.world_to_cell(r.x_mm, r.y_mm);
        let (cx, cy) = (c.x.floor() as i64, h as i64 - 1 - c.y.floor() as i64);
        for dx in -3..=3 {
            for dy in -3..=3 {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
                    img.put_pixel(x as u32, y as u32, Rgb(id_color(r.id)));
                }
            }
        }
    }
    img
}

async fn topdown(State(state): State<AppState>, UrlPath((s, n)): UrlPath<(String, u64)>) -> Result<Response, ApiError> {
    let seq = state.get(&s)?;
    let (dir, records, all) = {
        let seq = seq.read().await;
        let all = seq.current.to_records();
        (seq.dir.clone(), all.iter().filter(|r| r.frame == n).cloned().collect::<Vec<_>>(), all)
    };
    let map = tokio::task::spawn_blocking(move || {
        load_heightmap(&dir, n).unwrap_or_else(|| {
            // no depth data: a blank canvas spanning the tracks plus 1 m
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for r in &all {
                lo = [lo[0].min(r.x_mm), lo[1].min(r.y_mm)];
                hi = [hi[0].max(r.x_mm), hi[1].max(r.y_mm)];
            }
            if all.is_empty() {
                (lo, hi) = ([0.0; 2], [0.0; 2]);
            }
            let cell = crate::fusion::DEFAULT_CELL_MM;
            let ground = crate::geometry::GroundGrid { origin_x: lo[0] - 1000.0, origin_y: lo[1] - 1000.0, cell_mm: cell };
            let nx = ((hi[0] - lo[0] + 2000.0) / cell).ceil() as usize;
            let ny = ((hi[1] - lo[1] + 2000.0) / cell).ceil() as usize;
            TopDownMap::zeros(nx.max(1), ny.max(1), ground)
        })
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let img = render_topdown(&map, &records);
    let mut png = Cursor::new(Vec::new());
    img.write_to(&mut png, image::ImageFormat::Png).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png.into_inner()).into_response())
}
