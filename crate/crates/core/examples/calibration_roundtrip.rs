//! Calibrates the four-camera demo rig from simulated marker corners and
//! compares the solved poses with the ones used to render them.
//!
//! cargo run --release --example calibration_roundtrip -- [noise_px] [seed]

use std::collections::BTreeMap;

use autolabel::calibration::{calibrate, pose_error, reprojection_rms, CalibrationGraph, SolverOptions, DEFAULT_MARKER_SIDE_MM};
use autolabel::geometry::CameraIntrinsics;
use autolabel::simulate::{corner_rig, generate_scene, synth_marker_observations, zoned_scene_spec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let noise_px = args.get(1).map_or(Ok(0.5), |s| s.parse())?;
    let seed = args.get(2).map_or(Ok(1), |s| s.parse())?;

    // Markers are detected in the colour stream, so the rig uses 720p colour
    // intrinsics rather than the low-resolution depth ones.
    let mut spec = zoned_scene_spec(1, 1.0, seed);
    spec.cameras = corner_rig(CameraIntrinsics::new(600.0, 600.0, 639.5, 359.5, 1280, 720)?, 3000.0);
    let scene = generate_scene(&spec)?;
    let obs = synth_marker_observations(&scene, noise_px, seed);
    let intrinsics: BTreeMap<_, _> = scene.spec.cameras.iter().map(|c| (c.id, c.intrinsics)).collect();
    let graph = CalibrationGraph::new(intrinsics, &obs, 0, DEFAULT_MARKER_SIDE_MM)?;
    println!("{} corner observations, {} cameras, {} markers", graph.observation_count(), graph.cameras.len(), graph.markers.len());

    let result = calibrate(&graph, &SolverOptions::default())?;
    let stats = reprojection_rms(&result.poses, &result.marker_corners, &graph)?;
    println!("{} iterations, rms {:.4} px, max {:.4} px", result.iterations, stats.rms, stats.max);
    for cam in &scene.spec.cameras {
        let (rad, mm) = pose_error(&result.poses[&cam.id], &cam.pose);
        println!("camera {}: rotation error {:.2e} rad, translation error {:.3} mm, rms {:.4} px", cam.id, rad, mm, stats.per_camera[&cam.id]);
    }
    Ok(())
}
