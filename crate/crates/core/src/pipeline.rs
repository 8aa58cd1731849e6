//! Frame-by-frame auto-annotation: fuse depth, build the heightmap, detect,
//! track, and finally project the tracks into every camera.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detect::{detect_people, CropClassifier, Detection, DetectorParams, HeightBandClassifier};
use crate::fusion::{
    topdown_heightmap, DepthFrame, FusionError, FusionParams, GridSpec, PointCloud, Reconstructor, TopDownMap, VoxelGrid, DEFAULT_CELL_MM,
    DEFAULT_Z_MAX_MM,
};
use crate::geometry::{CameraId, CameraModel};
use crate::io::{self, DetectionRecord, IoError, StreamMeta};
use crate::project::generate_label_records;
use crate::track::{tracker_step, FrameContext, TrackError, TrackSet, TrackerParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("streams have different lengths: {0:?}")]
    StreamLengthMismatch(BTreeMap<CameraId, u64>),
    #[error("frame {frame}: {source}")]
    Fusion { frame: u64, source: FusionError },
    #[error("frame {frame}: {source}")]
    Track { frame: u64, source: TrackError },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePaths {
    /// Directory holding `meta.json` and the `cam{ID}` depth folders.
    pub depth_dir: PathBuf,
    pub calib: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundBounds {
    pub min_xy: [f64; 2],
    pub max_xy: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub cell_mm: f64,
    /// Margin around the rig footprint when `bounds` is not given.
    pub margin_mm: f64,
    pub z_max_mm: f64,
    /// Explicit ground extent; overrides the footprint-derived one.
    pub bounds: Option<GroundBounds>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { cell_mm: DEFAULT_CELL_MM, margin_mm: 1000.0, z_max_mm: DEFAULT_Z_MAX_MM, bounds: None }
    }
}

impl GridConfig {
    pub fn resolve(&self, rig: &[CameraModel], fusion: &FusionParams) -> Result<GridSpec, PipelineError> {
        let spec = match self.bounds {
            Some(b) => GridSpec {
                origin: [b.min_xy[0], b.min_xy[1], 0.0],
                dims: [
                    ((b.max_xy[0] - b.min_xy[0]) / self.cell_mm).ceil().max(0.0) as usize,
                    ((b.max_xy[1] - b.min_xy[1]) / self.cell_mm).ceil().max(0.0) as usize,
                    (self.z_max_mm / self.cell_mm).ceil().max(0.0) as usize,
                ],
                cell_mm: self.cell_mm,
            },
            None => GridSpec::from_rig(rig, self.margin_mm, self.z_max_mm, fusion.max_depth_mm as f64, self.cell_mm)
                .map_err(|e| PipelineError::Config(format!("grid: {e}")))?,
        };
        spec.validate().map_err(|e| PipelineError::Config(format!("grid: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    pub detector: DetectorParams,
    pub tracker: TrackerParams,
    pub fusion: FusionParams,
    pub grid: GridConfig,
    pub emit_labels: bool,
    pub emit_tracks: bool,
    /// Use point colors for the appearance term when frames carry RGB.
    pub use_appearance: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PipelinePaths::default(),
            detector: DetectorParams::default(),
            tracker: TrackerParams::default(),
            fusion: FusionParams::default(),
            grid: GridConfig::default(),
            emit_labels: true,
            emit_tracks: true,
            use_appearance: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Range checks on the numeric parameters.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut errs = Vec::new();
        let g = &self.grid;
        if !(g.cell_mm > 0.0) {
            errs.push("grid.cell_mm must be positive".to_string());
        }
        if !(g.z_max_mm > 0.0) {
            errs.push("grid.z_max_mm must be positive".into());
        }
        if let Some(b) = g.bounds {
            if !(b.min_xy[0] < b.max_xy[0] && b.min_xy[1] < b.max_xy[1]) {
                errs.push("grid.bounds must have min < max".into());
            }
        }
        let d = &self.detector;
        if d.proposals.window % 2 == 0 || d.proposals.window == 0 {
            errs.push("detector.window must be odd".into());
        }
        if !(0.0..=1.0).contains(&d.keep_threshold) {
            errs.push("detector.keep_threshold must be in [0, 1]".into());
        }
        let t = &self.tracker;
        if !(t.weights.spatial >= 0.0 && t.weights.appearance >= 0.0 && t.weights.gate_mm > 0.0) {
            errs.push("tracker.weights must be non-negative with a positive gate".into());
        }
        if t.confirm_hits == 0 {
            errs.push("tracker.confirm_hits must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&t.init_threshold) {
            errs.push("tracker.init_threshold must be in [0, 1]".into());
        }
        if self.fusion.max_depth_mm == 0 {
            errs.push("fusion.max_depth_mm must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Config(errs.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON form, leaving out the output
    /// directory so that identical runs written elsewhere share a digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths.output = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    /// Reads TOML or JSON, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// What one frame produced.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub frame: u64,
    pub detections: Vec<Detection>,
    pub map: TopDownMap,
}

/// Streaming pipeline state. Feed synchronized frames in order with
/// [`Pipeline::process`]; there is no lookahead.
pub struct Pipeline {
    reconstructor: Reconstructor,
    voxels: VoxelGrid,
    classifier: Box<dyn CropClassifier>,
    detector: DetectorParams,
    tracker: TrackerParams,
    use_appearance: bool,
    tracks: TrackSet,
}

impl Pipeline {
    pub fn new(rig: &[CameraModel], config: &PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let spec = config.grid.resolve(rig, &config.fusion)?;
        Ok(Self {
            reconstructor: Reconstructor::new(rig, config.fusion),
            voxels: VoxelGrid::new(spec).map_err(|e| PipelineError::Config(e.to_string()))?,
            classifier: Box::new(HeightBandClassifier::default()),
            detector: config.detector,
            tracker: config.tracker,
            use_appearance: config.use_appearance,
            tracks: TrackSet::new(),
        })
    }

    pub fn with_classifier(mut self, classifier: Box<dyn CropClassifier>) -> Self {
        self.classifier = classifier;
        self
    }

    pub fn grid(&self) -> &GridSpec {
        &self.voxels.spec
    }

    pub fn tracks(&self) -> &TrackSet {
        &self.tracks
    }

    pub fn into_tracks(self) -> TrackSet {
        self.tracks
    }

    /// Fusion, heightmap and detection for one synchronized frame set,
    /// without touching the tracker.
    pub fn perceive(&mut self, frames: &[DepthFrame]) -> Result<(FrameOutput, PointCloud), PipelineError> {
        let frame = frames.first().map_or(0, |f| f.frame_index);
        let cloud = self.reconstructor.reconstruct(frames).map_err(|source| PipelineError::Fusion { frame, source })?;
        self.voxels.clear();
        for p in &cloud.points {
            self.voxels.insert(p);
        }
        let map = topdown_heightmap(&self.voxels);
        let detections = detect_people(&map, self.classifier.as_ref(), &self.detector);
        Ok((FrameOutput { frame, detections, map }, cloud))
    }

    pub fn process(&mut self, frames: &[DepthFrame]) -> Result<FrameOutput, PipelineError> {
        let (out, cloud) = self.perceive(frames)?;
        let cloud = (self.use_appearance && cloud.colors.is_some()).then_some(&cloud);
        let ctx = FrameContext { cloud, map: Some(&out.map) };
        tracker_step(&mut self.tracks, out.frame, &out.detections, &ctx, &self.tracker)
            .map_err(|source| PipelineError::Track { frame: out.frame, source })?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_digest: String,
    pub seed: u64,
    pub frames: u64,
    pub cameras: Vec<CameraId>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub tracks: TrackSet,
    pub label_counts: BTreeMap<CameraId, usize>,
}

/// Frame count per stream camera. Uses `meta.json` when present, otherwise
/// every `cam{ID}` folder for a calibrated camera.
pub fn stream_lengths(depth_dir: &Path, rig: &[CameraModel]) -> Result<(f64, BTreeMap<CameraId, u64>), PipelineError> {
    let meta_path = depth_dir.join("meta.json");
    let (fps, cams): (f64, Vec<CameraId>) = if meta_path.exists() {
        let meta: StreamMeta = io::read_json(&meta_path)?;
        (meta.fps, meta.cameras.iter().map(|c| c.id).collect())
    } else {
        (15.0, rig.iter().map(|c| c.id).filter(|&id| io::camera_dir(depth_dir, id).is_dir()).collect())
    };
    let mut lengths = BTreeMap::new();
    for id in cams {
        if !rig.iter().any(|c| c.id == id) {
            return Err(PipelineError::Config(format!("stream camera {id} is not in the calibration")));
        }
        lengths.insert(id, io::count_depth_frames(depth_dir, id));
    }
    Ok((fps, lengths))
}

/// Runs the whole sequence from disk and writes `tracks.jsonl`,
/// `detections.jsonl`, `labels/cam{ID}.csv` and `manifest.json`.
pub fn run_autoannotation(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let rig = io::read_calibration(&config.paths.calib)?;
    let (fps, lengths) = stream_lengths(&config.paths.depth_dir, &rig)?;
    let mut distinct: Vec<u64> = lengths.values().copied().collect();
    distinct.dedup();
    if distinct.len() > 1 {
        return Err(PipelineError::StreamLengthMismatch(lengths));
    }
    let frames = distinct.first().copied().unwrap_or(0);
    let cams: Vec<CameraId> = lengths.keys().copied().collect();
    let stream_rig: Vec<CameraModel> = rig.iter().filter(|c| lengths.contains_key(&c.id)).cloned().collect();
    let mut pipeline = Pipeline::new(if stream_rig.is_empty() { &rig } else { &stream_rig }, config)?;
    log::info!("{} cameras, {} frames, grid {:?}", cams.len(), frames, pipeline.grid().dims);

    // frames are decoded one step ahead of fusion and tracking
    let (tx, rx) = mpsc::sync_channel::<Result<Vec<DepthFrame>, IoError>>(2);
    let dir = config.paths.depth_dir.clone();
    let reader_cams = cams.clone();
    let reader = thread::spawn(move || {
        for f in 0..frames {
            let set = reader_cams.iter().map(|&c| io::read_depth_frame(&dir, c, f, fps)).collect::<Result<Vec<_>, _>>();
            let failed = set.is_err();
            if tx.send(set).is_err() || failed {
                break;
            }
        }
    });
    let mut detections = Vec::new();
    let mut result = Ok(());
    for _ in 0..frames {
        let set = match rx.recv() {
            Ok(Ok(set)) => set,
            Ok(Err(e)) => {
                result = Err(e.into());
                break;
            }
            Err(_) => break,
        };
        match pipeline.process(&set) {
            Ok(out) => detections.extend(out.detections.iter().map(|d| DetectionRecord {
                frame: out.frame,
                x_mm: d.world_xy[0],
                y_mm: d.world_xy[1],
                score: d.score,
            })),
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    drop(rx);
    reader.join().expect("frame reader thread");
    result?;

    let tracks = pipeline.into_tracks();
    let out = &config.paths.output;
    let mut outputs = Vec::new();
    if config.emit_tracks {
        io::write_jsonl(&out.join("tracks.jsonl"), &tracks.to_records())?;
        io::write_jsonl(&out.join("detections.jsonl"), &detections)?;
        outputs.extend(["tracks.jsonl".to_string(), "detections.jsonl".to_string()]);
    }
    let mut label_counts = BTreeMap::new();
    if config.emit_labels {
        let labels = generate_label_records(&tracks, &stream_rig);
        io::write_label_csvs(&out.join("labels"), &cams, &labels)?;
        for &c in &cams {
            label_counts.insert(c, labels.iter().filter(|l| l.camera == c).count());
            outputs.push(format!("labels/cam{c}.csv"));
        }
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: config.digest(),
        seed: config.seed,
        frames,
        cameras: cams,
        outputs,
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(RunSummary { manifest, tracks, label_counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_from_empty_toml() {
        let cfg: PipelineConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        let cfg: PipelineConfig = toml::from_str("[tracker]\nmax_misses = 4\n[detector]\nwindow = 7\n").unwrap();
        assert_eq!(cfg.tracker.max_misses, 4);
        assert_eq!(cfg.detector.proposals.window, 7);
        assert_eq!(cfg.tracker.confirm_hits, 3);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.detector.proposals.window = 4;
        cfg.grid.cell_mm = 0.0;
        let PipelineError::Config(msg) = cfg.validate().unwrap_err() else { panic!() };
        assert!(msg.contains("window") && msg.contains("cell_mm"), "{msg}");
    }

    #[test]
    fn digest_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 9;
        assert_ne!(a.digest(), b.digest());
    }
}
