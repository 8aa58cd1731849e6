use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use autolabel::annotate::{EditAction, EditLog, EditOp};
use autolabel::io;
use autolabel::pipeline::{run_autoannotation, stream_lengths, GridConfig, Pipeline, PipelineConfig, PipelineError, PipelinePaths};
use autolabel::project::generate_label_records;
use autolabel::simulate::{export_scene, generate_scene, zoned_scene_spec, ExportOptions, Scene};
use autolabel::track::{TrackRecord, TrackSet};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_autolabel"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_scene() -> Scene {
    generate_scene(&zoned_scene_spec(3, 2.0, 9)).unwrap()
}

fn exported(dir: &Path) -> Scene {
    let scene = small_scene();
    export_scene(&scene, dir, &ExportOptions { noise_sigma_mm: 0.0, with_color: true, marker_noise_px: 0.0 }).unwrap();
    scene
}

fn config_for(dir: &Path, out: PathBuf) -> PipelineConfig {
    PipelineConfig {
        paths: PipelinePaths { depth_dir: dir.join("depth"), calib: dir.join("calib.json"), output: out },
        ..Default::default()
    }
}

#[test]
fn cli_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    io::write_json(&root.join("spec.json"), &small_scene().spec).unwrap();
    let sim = root.join("sim");

    let o = run(&["simulate", "--spec", s(&root.join("spec.json")), "--out", s(&sim), "--log-level", "warn"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["scene.json", "calib.json", "gt.jsonl", "observations.jsonl", "depth/meta.json", "depth/cam1/000000.pgm", "depth/cam1/000000.png"] {
        assert!(sim.join(f).exists(), "missing {f}");
    }

    let solved = root.join("solved/calib.json");
    let o = run(&["calibrate", "--observations", s(&sim.join("observations.jsonl")), "--intrinsics", s(&sim.join("calib.json")), "--anchor", "0", "--out", s(&solved)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("rms 0.000000"));
    let truth = io::read_calibration(&sim.join("calib.json")).unwrap();
    let got = io::read_calibration(&solved).unwrap();
    for (a, b) in truth.iter().zip(&got) {
        assert_eq!(a.id, b.id);
        assert!((a.pose.translation - b.pose.translation).norm() < 1e-3);
    }
    let markers: serde_json::Value = io::read_json(&root.join("solved/markers.json")).unwrap();
    assert_eq!(markers["markers"].as_array().unwrap().len(), 6);

    let run_dir = root.join("run");
    let o = run(&["track", "--depth", s(&sim.join("depth")), "--calib", s(&solved), "--out", s(&run_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["tracks.jsonl", "detections.jsonl", "manifest.json", "labels/cam1.csv", "labels/cam4.csv"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }

    let report = root.join("report.json");
    let o = run(&["evaluate", "--gt", s(&sim.join("gt.jsonl")), "--pred", s(&run_dir.join("tracks.jsonl")), "--out", s(&report)]);
    assert!(o.status.success());
    let r: serde_json::Value = io::read_json(&report).unwrap();
    assert_eq!(r["idf1"], 100.0);
    assert_eq!(r["ids"], 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("IDF1"));

    let tracks: Vec<TrackRecord> = io::read_jsonl(&run_dir.join("tracks.jsonl")).unwrap();
    let set = TrackSet::from_records(&tracks).unwrap();
    let victim = set.tracklets[0].id;
    let mut log = EditLog::for_base(&set);
    log.ops.push(EditOp::new(EditAction::Delete { id: victim }, "test"));
    log.write(&root.join("edits.jsonl")).unwrap();
    let fixed = root.join("fixed.jsonl");
    let o = run(&["apply-edits", "--tracks", s(&run_dir.join("tracks.jsonl")), "--edits", s(&root.join("edits.jsonl")), "--out", s(&fixed)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let after: Vec<TrackRecord> = io::read_jsonl(&fixed).unwrap();
    assert!(after.iter().all(|r| r.id != victim));
    assert_eq!(after.len(), tracks.len() - set.tracklets[0].states.len());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let sim = root.join("sim");
    exported(&sim);

    std::fs::write(root.join("bad.toml"), "detector = [").unwrap();
    let o = run(&["--config", s(&root.join("bad.toml")), "track", "--calib", s(&sim.join("calib.json")), "--out", s(&root.join("o"))]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(root.join("range.toml"), "[tracker]\nconfirm_hits = 0\n").unwrap();
    let o = run(&["--config", s(&root.join("range.toml")), "track", "--depth", s(&sim.join("depth")), "--calib", s(&sim.join("calib.json")), "--out", s(&root.join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["--log-level", "chatty", "evaluate", "--gt", "a", "--pred", "b"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["evaluate", "--gt", s(&root.join("missing.jsonl")), "--pred", s(&sim.join("gt.jsonl"))]);
    assert_eq!(o.status.code(), Some(3));

    std::fs::write(root.join("empty.jsonl"), "").unwrap();
    let o = run(&["evaluate", "--gt", s(&root.join("empty.jsonl")), "--pred", s(&sim.join("gt.jsonl"))]);
    assert_eq!(o.status.code(), Some(3), "empty ground truth is a data error");

    std::fs::remove_file(sim.join("depth/cam2/000029.pgm")).unwrap();
    let o = run(&["track", "--depth", s(&sim.join("depth")), "--calib", s(&sim.join("calib.json")), "--out", s(&root.join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("length"));
}

#[test]
fn stream_length_mismatch_is_reported_per_camera() {
    let tmp = tempfile::tempdir().unwrap();
    exported(tmp.path());
    std::fs::remove_file(tmp.path().join("depth/cam3/000029.pgm")).unwrap();
    let err = run_autoannotation(&config_for(tmp.path(), tmp.path().join("out"))).unwrap_err();
    let PipelineError::StreamLengthMismatch(lengths) = err else { panic!("unexpected {err:?}") };
    assert_eq!(lengths[&3], 29);
    assert_eq!(lengths[&1], 30);
    assert!(!tmp.path().join("out/manifest.json").exists());
}

#[test]
fn zero_length_streams_give_empty_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = small_scene();
    io::write_calibration(&tmp.path().join("calib.json"), &scene.spec.cameras).unwrap();
    for c in &scene.spec.cameras {
        std::fs::create_dir_all(io::camera_dir(&tmp.path().join("depth"), c.id)).unwrap();
    }
    let summary = run_autoannotation(&config_for(tmp.path(), tmp.path().join("out"))).unwrap();
    assert_eq!(summary.manifest.frames, 0);
    assert!(summary.tracks.tracklets.is_empty());
    assert_eq!(std::fs::read_to_string(tmp.path().join("out/tracks.jsonl")).unwrap(), "");
    let manifest: serde_json::Value = io::read_json(&tmp.path().join("out/manifest.json")).unwrap();
    assert_eq!(manifest["frames"], 0);
    assert_eq!(manifest["cameras"].as_array().unwrap().len(), 4);
}

#[test]
fn rerun_is_byte_identical_and_matches_streaming() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = exported(tmp.path());
    let a = run_autoannotation(&config_for(tmp.path(), tmp.path().join("a"))).unwrap();
    run_autoannotation(&config_for(tmp.path(), tmp.path().join("b"))).unwrap();
    for f in ["tracks.jsonl", "detections.jsonl", "manifest.json", "labels/cam1.csv", "labels/cam2.csv", "labels/cam3.csv", "labels/cam4.csv"] {
        assert_eq!(std::fs::read(tmp.path().join("a").join(f)).unwrap(), std::fs::read(tmp.path().join("b").join(f)).unwrap(), "{f} differs");
    }

    // frame-by-frame from disk equals the batch run
    let cfg = config_for(tmp.path(), tmp.path().join("c"));
    let rig = io::read_calibration(&cfg.paths.calib).unwrap();
    let (fps, lengths) = stream_lengths(&cfg.paths.depth_dir, &rig).unwrap();
    let mut p = Pipeline::new(&rig, &cfg).unwrap();
    for f in 0..scene.frame_count() {
        let frames: Vec<_> = lengths.keys().map(|&c| io::read_depth_frame(&cfg.paths.depth_dir, c, f, fps).unwrap()).collect();
        p.process(&frames).unwrap();
    }
    assert_eq!(p.tracks(), &a.tracks);

    // label counts agree with the projection of the final tracks
    let labels = generate_label_records(&a.tracks, &rig);
    for (&cam, &n) in &a.label_counts {
        assert_eq!(n, labels.iter().filter(|l| l.camera == cam).count());
        let csv = std::fs::read_to_string(tmp.path().join(format!("a/labels/cam{cam}.csv"))).unwrap();
        assert_eq!(csv.lines().filter(|l| !l.is_empty()).count(), n);
    }
}

#[test]
fn config_files_round_trip_and_default() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.seed = 17;
    cfg.grid = GridConfig { cell_mm: 25.0, ..Default::default() };
    io::write_json(&tmp.path().join("c.json"), &cfg).unwrap();
    assert_eq!(PipelineConfig::load(&tmp.path().join("c.json")).unwrap(), cfg);
    std::fs::write(tmp.path().join("c.toml"), toml::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(PipelineConfig::load(&tmp.path().join("c.toml")).unwrap().digest(), cfg.digest());
}
