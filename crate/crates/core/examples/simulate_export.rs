//! Writes a synthetic recording to disk in the layout the CLI reads.
//!
//! `cargo run --release --example simulate_export -- out/ [actors] [seconds] [noise_mm]`
//!
//! Afterwards:
//! `autolabel calibrate --observations out/observations.jsonl --intrinsics out/calib.json --anchor 0 --out out/solved.json`
//! `autolabel track --depth out/depth --calib out/calib.json --out out/run`
//! `autolabel evaluate --gt out/gt.jsonl --pred out/run/tracks.jsonl`

use std::path::PathBuf;

use autolabel::simulate::{export_scene, generate_scene, zoned_scene_spec, ExportOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map(String::as_str).unwrap_or("sim_out"));
    let actors: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let seconds: f64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(4.0);
    let noise: f64 = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(0.0);

    let scene = generate_scene(&zoned_scene_spec(actors, seconds, 7))?;
    let opts = ExportOptions { noise_sigma_mm: noise, with_color: true, marker_noise_px: 0.0 };
    export_scene(&scene, &out, &opts)?;
    println!(
        "{} frames x {} cameras, {} ground-truth states -> {}",
        scene.frame_count(),
        scene.spec.cameras.len(),
        scene.ground_truth.state_count(),
        out.display()
    );
    Ok(())
}
