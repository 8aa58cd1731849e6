//! Top-down person detection.
//!
//! Stage one proposes local maxima of the heightmap; stage two scores a
//! 20×20-cell crop around each proposal with a [`CropClassifier`]. The same
//! local-maxima machinery drives the rule-based ground-plane heatmap fusion
//! used by the DMCT-style baseline.

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::TopDownMap;
use crate::geometry::{apply_homography, CameraId, GroundGrid};

/// Side of the square crop handed to the classifier, in heightmap cells.
pub const CROP_SIDE: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("crop has {0} cells, expected {CROP_SIDE}x{CROP_SIDE}")]
    BadCropShape(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub cell: (usize, usize),
    pub peak_value: u16,
    /// Row-major `CROP_SIDE × CROP_SIDE` patch; row `i` is `m - 10 + i`.
    pub crop: Vec<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cell: (usize, usize),
    pub world_xy: [f64; 2],
    pub score: f64,
    pub peak_value: u16,
}

impl Detection {
    pub fn at_cell(ground: &GroundGrid, cell: (usize, usize), score: f64, peak_value: u16) -> Self {
        let c = ground.cell_center(cell.0, cell.1);
        Self { cell, world_xy: [c.x, c.y], score, peak_value }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalParams {
    pub min_height_cells: u16,
    /// Odd side of the square comparison window.
    pub window: usize,
    pub nms_radius_cells: f64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self { min_height_cells: 25, window: 5, nms_radius_cells: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    #[serde(flatten)]
    pub proposals: ProposalParams,
    pub keep_threshold: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self { proposals: ProposalParams::default(), keep_threshold: 0.5 }
    }
}

/// Separable Gaussian blur with zero padding over a row-major `w × h` grid.
pub fn gaussian_blur(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 || values.is_empty() {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let xx = x as i64 + i as i64 - radius;
                if xx >= 0 && (xx as usize) < w {
                    acc += k * values[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let yy = y as i64 + i as i64 - radius;
                if yy >= 0 && (yy as usize) < h {
                    acc += k * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Cells `(r, c)` of a row-major `rows × cols` grid whose `(value, tiebreak)`
/// pair is lexicographically strictly greater than that of every other cell
/// in the surrounding `window × window` square, with `value >= min_value`.
/// Returned in value-descending, then row-major order, after greedy
/// suppression of weaker maxima within `nms_radius` cells.
pub fn local_maxima(
    values: &[f64],
    tiebreak: &[f64],
    rows: usize,
    cols: usize,
    window: usize,
    min_value: f64,
    nms_radius: f64,
) -> Vec<(usize, usize)> {
    let half = (window / 2) as i64;
    let key = |i: usize| (values[i], tiebreak[i]);
    let mut found = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if !(values[i] >= min_value) {
                continue;
            }
            let me = key(i);
            let mut strict = true;
            'scan: for dr in -half..=half {
                for dc in -half..=half {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        continue;
                    }
                    let other = key(rr as usize * cols + cc as usize);
                    if other.0 > me.0 || (other.0 == me.0 && other.1 >= me.1) {
                        strict = false;
                        break 'scan;
                    }
                }
            }
            if strict {
                found.push((r, c));
            }
        }
    }
    found.sort_by(|a, b| {
        let (ka, kb) = (values[a.0 * cols + a.1], values[b.0 * cols + b.1]);
        kb.total_cmp(&ka).then(a.cmp(b))
    });
    let r2 = nms_radius * nms_radius;
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for cand in found {
        let close = kept.iter().any(|k| {
            let dr = k.0 as f64 - cand.0 as f64;
            let dc = k.1 as f64 - cand.1 as f64;
            dr * dr + dc * dc <= r2
        });
        if !close {
            kept.push(cand);
        }
    }
    kept
}

/// Plateau tie-break for heightmap maxima: a blurred copy of the map, so that
/// among equal-height cells the one closest to the local mass center wins.
const TIEBREAK_SIGMA_CELLS: f64 = 2.0;

pub fn crop_at(map: &TopDownMap, (m, n): (usize, usize)) -> Vec<u16> {
    let half = (CROP_SIDE / 2) as i64;
    let mut crop = Vec::with_capacity(CROP_SIDE * CROP_SIDE);
    for i in 0..CROP_SIDE as i64 {
        for j in 0..CROP_SIDE as i64 {
            crop.push(map.get_or_zero(m as i64 - half + i, n as i64 - half + j));
        }
    }
    crop
}

pub fn extract_proposals(map: &TopDownMap, params: &ProposalParams) -> Vec<Proposal> {
    assert!(params.window >= 3 && params.window % 2 == 1, "window must be odd and >= 3");
    if map.values.is_empty() {
        return Vec::new();
    }
    let values: Vec<f64> = map.values.iter().map(|&v| v as f64).collect();
    let tiebreak = gaussian_blur(&values, map.ny, map.nx, TIEBREAK_SIGMA_CELLS);
    local_maxima(&values, &tiebreak, map.nx, map.ny, params.window, params.min_height_cells.max(1) as f64, params.nms_radius_cells)
        .into_iter()
        .map(|cell| Proposal { cell, peak_value: map.get(cell.0, cell.1), crop: crop_at(map, cell) })
        .collect()
}

/// Second-stage person classifier over a heightmap crop.
pub trait CropClassifier: Send + Sync {
    /// Person score in `[0, 1]` for a validated `CROP_SIDE × CROP_SIDE` crop.
    fn score(&self, proposal: &Proposal, cell_mm: f64) -> f64;
}

/// Rule-based stand-in for a learned classifier: a person is a peak within a
/// standing-height band over a sufficiently filled footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightBandClassifier {
    pub min_height_mm: f64,
    pub max_height_mm: f64,
    pub min_filled_cells: usize,
}

impl Default for HeightBandClassifier {
    fn default() -> Self {
        Self { min_height_mm: 1000.0, max_height_mm: 2200.0, min_filled_cells: 30 }
    }
}

impl CropClassifier for HeightBandClassifier {
    fn score(&self, proposal: &Proposal, cell_mm: f64) -> f64 {
        let h = proposal.peak_value as f64 * cell_mm;
        let filled = proposal.crop.iter().filter(|&&v| v > 0).count();
        if h >= self.min_height_mm && h <= self.max_height_mm && filled >= self.min_filled_cells {
            1.0
        } else {
            0.0
        }
    }
}

pub fn classify_crop(proposal: &Proposal, classifier: &dyn CropClassifier, cell_mm: f64) -> Result<f64, DetectError> {
    if proposal.crop.len() != CROP_SIDE * CROP_SIDE {
        return Err(DetectError::BadCropShape(proposal.crop.len()));
    }
    Ok(classifier.score(proposal, cell_mm).clamp(0.0, 1.0))
}

pub fn detect_people(map: &TopDownMap, classifier: &dyn CropClassifier, params: &DetectorParams) -> Vec<Detection> {
    extract_proposals(map, &params.proposals)
        .into_iter()
        .filter_map(|p| {
            let score = classify_crop(&p, classifier, map.cell_mm()).ok()?;
            (score >= params.keep_threshold).then(|| Detection::at_cell(&map.ground, p.cell, score, p.peak_value))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapSource {
    Camera(CameraId),
    Ground,
}

/// Non-negative scalar field. Camera heatmaps are indexed by pixel `(u, v)`,
/// ground heatmaps by cell `(m, n)`; both store `values[y * width + x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub source: HeatmapSource,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(source: HeatmapSource, width: usize, height: usize) -> Self {
        Self { source, width, height, values: vec![0.0; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.values[y * self.width + x] = v;
    }

    fn check(&self) -> Result<(), DetectError> {
        if self.values.len() != self.width * self.height {
            return Err(DetectError::DimensionMismatch(format!(
                "heatmap {:?} has {} values for {}x{}",
                self.source,
                self.values.len(),
                self.width,
                self.height
            )));
        }
        if self.values.iter().any(|v| !(*v >= 0.0)) {
            return Err(DetectError::DimensionMismatch(format!("heatmap {:?} has negative or NaN values", self.source)));
        }
        Ok(())
    }

    fn sample(&self, p: &Vector2<f64>, bilinear: bool) -> f32 {
        if !bilinear {
            let (u, v) = (p.x.round(), p.y.round());
            if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
                return 0.0;
            }
            return self.at(u as usize, v as usize);
        }
        let (u0, v0) = (p.x.floor(), p.y.floor());
        let (fu, fv) = ((p.x - u0) as f32, (p.y - v0) as f32);
        let get = |u: f64, v: f64| {
            if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
                0.0
            } else {
                self.at(u as usize, v as usize)
            }
        };
        get(u0, v0) * (1.0 - fu) * (1.0 - fv)
            + get(u0 + 1.0, v0) * fu * (1.0 - fv)
            + get(u0, v0 + 1.0) * (1.0 - fu) * fv
            + get(u0 + 1.0, v0 + 1.0) * fu * fv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundFusionParams {
    pub blur_sigma_cells: f64,
    pub window: usize,
    pub min_score: f64,
    pub nms_radius_cells: f64,
    pub bilinear: bool,
}

impl Default for GroundFusionParams {
    fn default() -> Self {
        Self { blur_sigma_cells: 2.0, window: 5, min_score: 0.01, nms_radius_cells: 5.0, bilinear: false }
    }
}

/// Warps each view heatmap onto the ground grid through its image→grid
/// homography, keeps the per-cell maximum over views, blurs, and reports
/// local maxima as detections.
pub fn fuse_ground_heatmaps(
    views: &[(Heatmap, Matrix3<f64>)],
    grid: &GroundGrid,
    nx: usize,
    ny: usize,
    params: &GroundFusionParams,
) -> Result<(Heatmap, Vec<Detection>), DetectError> {
    if nx == 0 || ny == 0 {
        return Err(DetectError::DimensionMismatch("empty ground grid".into()));
    }
    let mut fused = vec![0.0f64; nx * ny];
    for (hm, img_to_grid) in views {
        hm.check()?;
        let grid_to_img = img_to_grid
            .try_inverse()
            .ok_or_else(|| DetectError::DimensionMismatch(format!("homography for {:?} is singular", hm.source)))?;
        for n in 0..ny {
            for m in 0..nx {
                let Some(p) = apply_homography(&grid_to_img, &Vector2::new(m as f64 + 0.5, n as f64 + 0.5)) else {
                    continue;
                };
                // Cells behind the camera map through the homography too;
                // reject them by checking the homogeneous sign.
                let q = grid_to_img * nalgebra::Vector3::new(m as f64 + 0.5, n as f64 + 0.5, 1.0);
                if q.z <= 0.0 {
                    continue;
                }
                let v = hm.sample(&p, params.bilinear) as f64;
                let slot = &mut fused[n * nx + m];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    let blurred = gaussian_blur(&fused, nx, ny, params.blur_sigma_cells);
    let tiebreak = gaussian_blur(&blurred, nx, ny, params.blur_sigma_cells);
    let peaks = local_maxima(&blurred, &tiebreak, ny, nx, params.window, params.min_score, params.nms_radius_cells);
    let detections = peaks
        .into_iter()
        .map(|(n, m)| Detection::at_cell(grid, (m, n), blurred[n * nx + m].min(1.0), 0))
        .collect();
    let heatmap = Heatmap { source: HeatmapSource::Ground, width: nx, height: ny, values: blurred.iter().map(|&v| v as f32).collect() };
    Ok((heatmap, detections))
}
