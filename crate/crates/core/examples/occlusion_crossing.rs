//! Two people passing each other closely under depth noise. Prints the
//! number of close passes and the identity switches per seed.
//!
//! cargo run --release --example occlusion_crossing -- [seeds] [noise_mm]

use autolabel::metrics::{clear_mot_evaluate, FramePoints, DEFAULT_THRESHOLD_MM};
use autolabel::pipeline::{GridConfig, GroundBounds, Pipeline, PipelineConfig};
use autolabel::simulate::{close_passes, crossing_scene_spec, generate_scene, render_depth_frame, RenderOptions, ROOM_HALF_EXTENT_MM};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(Ok(10), |s| s.parse())?;
    let noise: f64 = args.get(2).map_or(Ok(10.0), |s| s.parse())?;
    let config = PipelineConfig {
        grid: GridConfig {
            bounds: Some(GroundBounds { min_xy: ROOM_HALF_EXTENT_MM.map(|v| -v), max_xy: ROOM_HALF_EXTENT_MM }),
            ..Default::default()
        },
        ..Default::default()
    };
    for seed in 0..seeds {
        let scene = generate_scene(&crossing_scene_spec(12.0, seed))?;
        let rig = &scene.spec.cameras;
        let mut pipeline = Pipeline::new(rig, &config)?;
        let opts = RenderOptions { noise_sigma_mm: noise, with_color: true };
        for f in 0..scene.frame_count() {
            let frames = rig.iter().map(|c| render_depth_frame(&scene, c, f, &opts)).collect::<Result<Vec<_>, _>>()?;
            pipeline.process(&frames)?;
        }
        let passes = close_passes(&scene, 0, 1, 500.0);
        let gt = FramePoints::from_tracks(&scene.ground_truth);
        let pred = FramePoints::from_tracks(pipeline.tracks());
        let m = clear_mot_evaluate(&gt, &pred, DEFAULT_THRESHOLD_MM)?;
        println!("seed {seed}: {} passes, IDs {}, FP {}, FN {}, MOTA {:.2}", passes.len(), m.ids, m.fp, m.fn_, m.mota);
    }
    Ok(())
}
