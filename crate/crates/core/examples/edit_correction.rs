//! Damages ground-truth tracks with identity swaps and ghost tracklets,
//! derives a correcting edit log, and replays it.
//!
//! cargo run --release --example edit_correction -- [swaps] [ghosts] [out.jsonl]

use autolabel::annotate::{propose_corrections, replay_edit_log};
use autolabel::metrics::{evaluate, format_table, FramePoints, DEFAULT_THRESHOLD_MM};
use autolabel::simulate::{corrupt_tracks, generate_scene, zoned_scene_spec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let swaps = args.get(1).map_or(Ok(3), |s| s.parse())?;
    let ghosts = args.get(2).map_or(Ok(2), |s| s.parse())?;
    let scene = generate_scene(&zoned_scene_spec(5, 20.0, 11))?;
    let gt = FramePoints::from_tracks(&scene.ground_truth);

    let damaged = corrupt_tracks(&scene.ground_truth, &scene.spec.bounds, swaps, ghosts, 11);
    let log = propose_corrections(&damaged, &gt, DEFAULT_THRESHOLD_MM, "example");
    let fixed = replay_edit_log(&damaged, &log)?;
    for op in &log.ops {
        println!("{}", serde_json::to_string(op)?);
    }
    let rows = [
        ("damaged".to_string(), evaluate(&gt, &FramePoints::from_tracks(&damaged), DEFAULT_THRESHOLD_MM)?),
        ("corrected".to_string(), evaluate(&gt, &FramePoints::from_tracks(&fixed), DEFAULT_THRESHOLD_MM)?),
    ];
    print!("{}", format_table(&rows));
    if let Some(path) = args.get(3) {
        log.write(std::path::Path::new(path))?;
    }
    Ok(())
}
