//! On-disk formats: calibration JSON, JSON Lines record files, 16-bit PGM
//! depth frames with RGB PNG companions, MOT-style label CSVs and raw f32
//! heatmaps.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{Heatmap, HeatmapSource};
use crate::fusion::DepthFrame;
use crate::geometry::{CameraId, CameraModel, MarkerId};
use crate::project::LabelRecord;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }
    fn format(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Format { path: path.to_path_buf(), msg: msg.into() }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| IoError::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| IoError::io(path, e))?))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Json { path: path.to_path_buf(), line: e.line(), source: e })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| IoError::Json { path: path.to_path_buf(), line: 0, source: e })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| IoError::io(path, e))
}

/// Parses JSON Lines text, skipping blank lines.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>, IoError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| IoError::Json { path: path.to_path_buf(), line: i + 1, source: e }))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_jsonl(&text, path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| IoError::Json { path: path.to_path_buf(), line: 0, source: e })?;
        w.write_all(b"\n").map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub cameras: Vec<CameraModel>,
    pub ground: GroundPlane,
}

pub fn read_calibration(path: &Path) -> Result<Vec<CameraModel>, IoError> {
    let file: CalibrationFile = read_json(path)?;
    if file.ground.z != 0.0 {
        return Err(IoError::format(path, "only a ground plane at z = 0 is supported"));
    }
    for c in &file.cameras {
        c.intrinsics.validate().map_err(|e| IoError::format(path, format!("camera {}: {e}", c.id)))?;
    }
    Ok(file.cameras)
}

pub fn write_calibration(path: &Path, cameras: &[CameraModel]) -> Result<(), IoError> {
    write_json(path, &CalibrationFile { cameras: cameras.to_vec(), ground: GroundPlane { z: 0.0 } })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerCorners {
    pub id: MarkerId,
    pub corners: [[f64; 3]; 4],
}

pub fn write_markers(path: &Path, markers: &std::collections::BTreeMap<MarkerId, [Vector3<f64>; 4]>) -> Result<(), IoError> {
    let list: Vec<MarkerCorners> = markers
        .iter()
        .map(|(&id, c)| MarkerCorners { id, corners: c.map(|p| [p.x, p.y, p.z]) })
        .collect();
    write_json(path, &serde_json::json!({ "markers": list }))
}

/// `meta.json` beside the per-camera depth directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub fps: f64,
    pub frames: u64,
    pub cameras: Vec<StreamCamera>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamCamera {
    pub id: CameraId,
    pub width: u32,
    pub height: u32,
}

pub fn camera_dir(root: &Path, camera: CameraId) -> PathBuf {
    root.join(format!("cam{camera}"))
}

pub fn depth_path(root: &Path, camera: CameraId, frame: u64) -> PathBuf {
    camera_dir(root, camera).join(format!("{frame:06}.pgm"))
}

pub fn color_path(root: &Path, camera: CameraId, frame: u64) -> PathBuf {
    camera_dir(root, camera).join(format!("{frame:06}.png"))
}

/// Writes the depth as a binary 16-bit PGM and, when present, the color as
/// an RGB PNG next to it.
pub fn write_depth_frame(root: &Path, frame: &DepthFrame) -> Result<(), IoError> {
    let path = depth_path(root, frame.camera_id, frame.frame_index);
    if frame.depth.len() != (frame.width * frame.height) as usize {
        return Err(IoError::format(&path, "depth buffer size mismatch"));
    }
    let mut w = create(&path)?;
    let mut bytes = format!("P5\n{} {}\n65535\n", frame.width, frame.height).into_bytes();
    bytes.extend(frame.depth.iter().flat_map(|d| d.to_be_bytes()));
    w.write_all(&bytes).map_err(|e| IoError::io(&path, e))?;
    w.flush().map_err(|e| IoError::io(&path, e))?;
    if let Some(color) = &frame.color {
        let path = color_path(root, frame.camera_id, frame.frame_index);
        let raw: Vec<u8> = color.iter().flatten().copied().collect();
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(frame.width, frame.height, raw).ok_or_else(|| IoError::format(&path, "color buffer size mismatch"))?;
        img.save(&path).map_err(|e| IoError::format(&path, e.to_string()))?;
    }
    Ok(())
}

/// Reads one depth frame (and its PNG companion if it exists).
pub fn read_depth_frame(root: &Path, camera: CameraId, frame: u64, fps: f64) -> Result<DepthFrame, IoError> {
    let path = depth_path(root, camera, frame);
    let img = image::open(&path).map_err(|e| IoError::format(&path, e.to_string()))?;
    let image::DynamicImage::ImageLuma16(buf) = img else {
        return Err(IoError::format(&path, "expected a 16-bit grayscale PGM"));
    };
    let (width, height) = buf.dimensions();
    let cpath = color_path(root, camera, frame);
    let color = if cpath.exists() {
        let rgb = image::open(&cpath).map_err(|e| IoError::format(&cpath, e.to_string()))?.to_rgb8();
        if rgb.dimensions() != (width, height) {
            return Err(IoError::format(&cpath, "color and depth sizes differ"));
        }
        Some(rgb.pixels().map(|p| p.0).collect())
    } else {
        None
    };
    Ok(DepthFrame {
        camera_id: camera,
        frame_index: frame,
        timestamp_ms: frame as f64 * 1000.0 / fps,
        width,
        height,
        depth: buf.into_raw(),
        color,
    })
}

/// Counts consecutive `{frame:06}.pgm` files from frame 0.
pub fn count_depth_frames(root: &Path, camera: CameraId) -> u64 {
    let mut n = 0;
    while depth_path(root, camera, n).exists() {
        n += 1;
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: u64,
    pub x_mm: f64,
    pub y_mm: f64,
    pub score: f64,
}

/// Writes one MOT-style CSV per camera (`cam{ID}.csv`) under `dir`. Every
/// camera in `cameras` gets a file, possibly empty.
pub fn write_label_csvs(dir: &Path, cameras: &[CameraId], labels: &[LabelRecord]) -> Result<Vec<PathBuf>, IoError> {
    let mut paths = Vec::new();
    for &cam in cameras {
        let path = dir.join(format!("cam{cam}.csv"));
        let mut w = create(&path)?;
        for r in labels.iter().filter(|r| r.camera == cam) {
            let b = &r.bbox;
            writeln!(w, "{},{},{:.2},{:.2},{:.2},{:.2},{:.4}", r.frame, r.track_id, b.left, b.top, b.width, b.height, r.conf)
                .map_err(|e| IoError::io(&path, e))?;
        }
        w.flush().map_err(|e| IoError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub width: usize,
    pub height: usize,
    pub source: HeatmapSource,
}

/// Heatmap as little-endian f32 at `path` with a JSON sidecar at
/// `path.json`.
pub fn write_heatmap(path: &Path, map: &Heatmap) -> Result<(), IoError> {
    let mut w = create(path)?;
    for v in &map.values {
        w.write_all(&v.to_le_bytes()).map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))?;
    write_json(&sidecar_path(path), &HeatmapSidecar { width: map.width, height: map.height, source: map.source.clone() })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_heatmap(path: &Path) -> Result<Heatmap, IoError> {
    let meta: HeatmapSidecar = read_json(&sidecar_path(path))?;
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    if bytes.len() != meta.width * meta.height * 4 {
        return Err(IoError::format(path, format!("expected {} bytes, found {}", meta.width * meta.height * 4, bytes.len())));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Heatmap { source: meta.source, width: meta.width, height: meta.height, values })
}
