//! One frame through fusion and heightmap detection, next to the
//! ground-plane heatmap baseline fed with synthetic per-view heatmaps.
//!
//! cargo run --release --example perception_baselines -- [frame]

use autolabel::detect::{fuse_ground_heatmaps, GroundFusionParams, Heatmap, HeatmapSource};
use autolabel::geometry::DEFAULT_MAX_HOMOGRAPHY_CONDITION;
use autolabel::pipeline::{GridConfig, GroundBounds, Pipeline, PipelineConfig};
use autolabel::simulate::{generate_scene, render_depth_frame, zoned_scene_spec, RenderOptions, ROOM_HALF_EXTENT_MM};
use nalgebra::Vector3;

/// A view heatmap with a Gaussian bump at every actor's projected foot point.
fn foot_heatmap(cam: &autolabel::geometry::CameraModel, feet: &[[f64; 2]], sigma_px: f64) -> Heatmap {
    let (w, h) = (cam.intrinsics.width as usize, cam.intrinsics.height as usize);
    let mut hm = Heatmap::zeros(HeatmapSource::Camera(cam.id), w, h);
    for xy in feet {
        let Ok(p) = cam.project_point(&Vector3::new(xy[0], xy[1], 0.0)) else { continue };
        for v in 0..h {
            for u in 0..w {
                let d2 = (u as f64 - p.x).powi(2) + (v as f64 - p.y).powi(2);
                let val = (-d2 / (2.0 * sigma_px * sigma_px)).exp() as f32;
                if val > hm.at(u, v) {
                    hm.set(u, v, val);
                }
            }
        }
    }
    hm
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let frame: u64 = std::env::args().nth(1).map_or(Ok(30), |s| s.parse())?;
    let scene = generate_scene(&zoned_scene_spec(4, 4.0, 3))?;
    let rig = &scene.spec.cameras;
    let config = PipelineConfig {
        grid: GridConfig {
            bounds: Some(GroundBounds { min_xy: ROOM_HALF_EXTENT_MM.map(|v| -v), max_xy: ROOM_HALF_EXTENT_MM }),
            ..Default::default()
        },
        ..Default::default()
    };
    let mut pipeline = Pipeline::new(rig, &config)?;
    let opts = RenderOptions { noise_sigma_mm: 10.0, with_color: true };
    let frames = rig.iter().map(|c| render_depth_frame(&scene, c, frame, &opts)).collect::<Result<Vec<_>, _>>()?;
    let (out, cloud) = pipeline.perceive(&frames)?;
    let occupied = out.map.values.iter().filter(|&&v| v > 0).count();
    println!("{} points, {} occupied heightmap cells", cloud.len(), occupied);

    let truth: Vec<[f64; 2]> = scene.poses[frame as usize].iter().map(|p| p.xy).collect();
    println!("truth:");
    for xy in &truth {
        println!("  ({:7.0}, {:7.0})", xy[0], xy[1]);
    }
    println!("heightmap detections:");
    for d in &out.detections {
        println!("  ({:7.0}, {:7.0}) score {:.2}, top {} cells", d.world_xy[0], d.world_xy[1], d.score, d.peak_value);
    }

    let grid = out.map.ground;
    let views = rig
        .iter()
        .map(|c| Ok((foot_heatmap(c, &truth, 4.0), c.ground_plane_homography(&grid, DEFAULT_MAX_HOMOGRAPHY_CONDITION)?)))
        .collect::<Result<Vec<_>, autolabel::geometry::GeometryError>>()?;
    let (_, ground) = fuse_ground_heatmaps(&views, &grid, out.map.nx, out.map.ny, &GroundFusionParams::default())?;
    println!("ground-heatmap detections:");
    for d in &ground {
        println!("  ({:7.0}, {:7.0}) score {:.2}", d.world_xy[0], d.world_xy[1], d.score);
    }
    Ok(())
}
