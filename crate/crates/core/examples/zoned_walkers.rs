//! Renders the zoned demo scene, runs the full pipeline on it and scores
//! the result against the simulator's ground truth.
//!
//! cargo run --release --example zoned_walkers -- [actors] [seconds]

use std::time::Instant;

use autolabel::metrics::{evaluate, format_table, FramePoints, DEFAULT_THRESHOLD_MM};
use autolabel::pipeline::{GridConfig, GroundBounds, Pipeline, PipelineConfig};
use autolabel::simulate::{generate_scene, render_depth_frame, zoned_scene_spec, RenderOptions, ROOM_HALF_EXTENT_MM};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let actors = args.get(1).map_or(Ok(5), |s| s.parse())?;
    let seconds = args.get(2).map_or(Ok(60.0), |s| s.parse())?;
    let scene = generate_scene(&zoned_scene_spec(actors, seconds, 7))?;
    let rig = scene.spec.cameras.clone();
    let config = PipelineConfig {
        grid: GridConfig {
            bounds: Some(GroundBounds { min_xy: ROOM_HALF_EXTENT_MM.map(|v| -v), max_xy: ROOM_HALF_EXTENT_MM }),
            ..Default::default()
        },
        ..Default::default()
    };
    let mut pipeline = Pipeline::new(&rig, &config)?;
    let opts = RenderOptions { noise_sigma_mm: 0.0, with_color: true };
    let (mut t_render, mut t_pipe) = (0.0, 0.0);
    for f in 0..scene.frame_count() {
        let t0 = Instant::now();
        let frames = rig.iter().map(|c| render_depth_frame(&scene, c, f, &opts)).collect::<Result<Vec<_>, _>>()?;
        let t1 = Instant::now();
        pipeline.process(&frames)?;
        t_render += (t1 - t0).as_secs_f64();
        t_pipe += t1.elapsed().as_secs_f64();
    }
    println!("render {t_render:.2}s, pipeline {t_pipe:.2}s");
    let gt = FramePoints::from_tracks(&scene.ground_truth);
    let pred = FramePoints::from_tracks(pipeline.tracks());
    let report = evaluate(&gt, &pred, DEFAULT_THRESHOLD_MM)?;
    print!("{}", format_table(&[("zoned".to_string(), report)]));
    Ok(())
}
