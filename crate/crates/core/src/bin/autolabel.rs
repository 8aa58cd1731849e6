//! Command-line front end. Exit codes: 0 ok, 2 configuration error, 3 data
//! error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use autolabel::annotate::{apply_edits_files, service};
use autolabel::calibration::{calibrate, reprojection_rms, CalibrationGraph, MarkerObservation, SolverOptions, DEFAULT_HUBER_PX};
use autolabel::geometry::{CameraId, CameraIntrinsics, CameraModel};
use autolabel::io;
use autolabel::metrics::{evaluate, format_table, FramePoints};
use autolabel::pipeline::{run_autoannotation, PipelineConfig, PipelineError};
use autolabel::simulate::{export_scene, generate_scene, ExportOptions, SceneSpec};
use autolabel::track::TrackRecord;

#[derive(Parser)]
#[command(name = "autolabel", version, about = "Auto-annotation for multi-camera RGB-D people tracking")]
struct Cli {
    /// Pipeline configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the scene or configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene to disk.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise_mm: f64,
        #[arg(long, default_value_t = 0.0)]
        marker_noise_px: f64,
        #[arg(long)]
        no_color: bool,
    },
    /// Solve camera extrinsics from marker corner observations.
    Calibrate {
        #[arg(long)]
        observations: PathBuf,
        /// JSON with `cameras: [{id, intrinsics}]`; a calibration file works.
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        anchor: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 150.0)]
        marker_side_mm: f64,
        /// Use the Huber loss (2 px) instead of plain squares.
        #[arg(long)]
        huber: bool,
    },
    /// Run the auto-annotation pipeline over recorded depth streams.
    Track {
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted tracks against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 1000.0)]
        threshold_mm: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Row label for the printed table.
        #[arg(long, default_value = "seq")]
        name: String,
    },
    /// Replay an edit log over a track file.
    ApplyEdits {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        edits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the review API over a data directory.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

enum Failure {
    Config(String),
    Data(String),
}

impl Failure {
    fn data(e: impl std::fmt::Display) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

#[derive(Deserialize)]
struct IntrinsicsEntry {
    id: CameraId,
    intrinsics: CameraIntrinsics,
}

#[derive(Deserialize)]
struct IntrinsicsFile {
    cameras: Vec<IntrinsicsEntry>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn simulate(cli: &Cli, spec: &Path, out: &Path, opts: ExportOptions) -> Result<(), Failure> {
    let mut spec: SceneSpec = io::read_json(spec).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let scene = generate_scene(&spec).map_err(|e| Failure::Config(e.to_string()))?;
    export_scene(&scene, out, &opts).map_err(Failure::data)?;
    log::info!("wrote {} frames from {} cameras to {}", scene.frame_count(), spec.cameras.len(), out.display());
    Ok(())
}

fn calibrate_cmd(observations: &Path, intrinsics: &Path, anchor: u32, out: &Path, side: f64, huber: bool) -> Result<(), Failure> {
    let obs: Vec<MarkerObservation> = io::read_jsonl(observations).map_err(Failure::data)?;
    let file: IntrinsicsFile = io::read_json(intrinsics).map_err(|e| Failure::Config(e.to_string()))?;
    let cams: BTreeMap<CameraId, CameraIntrinsics> = file.cameras.iter().map(|c| (c.id, c.intrinsics)).collect();
    let graph = CalibrationGraph::new(cams, &obs, anchor, side).map_err(Failure::data)?;
    let opts = SolverOptions { huber_px: huber.then_some(DEFAULT_HUBER_PX), ..Default::default() };
    let result = calibrate(&graph, &opts).map_err(Failure::data)?;
    let stats = reprojection_rms(&result.poses, &result.marker_corners, &graph).map_err(Failure::data)?;
    let cameras: Vec<CameraModel> = result.cameras(&graph);
    io::write_calibration(out, &cameras).map_err(Failure::data)?;
    let markers = out.with_file_name("markers.json");
    io::write_markers(&markers, &result.marker_corners).map_err(Failure::data)?;
    println!("rms {:.6} px, max {:.6} px, {} iterations", stats.rms, stats.max, result.iterations);
    Ok(())
}

fn track(cli: &Cli, depth: &Option<PathBuf>, calib: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    if let Some(d) = depth {
        cfg.paths.depth_dir = d.clone();
    }
    if let Some(c) = calib {
        cfg.paths.calib = c.clone();
    }
    if let Some(o) = out {
        cfg.paths.output = o.clone();
    }
    if cfg.paths.calib.as_os_str().is_empty() || cfg.paths.output.as_os_str().is_empty() {
        return Err(Failure::Config("track needs --calib and --out (or paths in --config)".into()));
    }
    let summary = run_autoannotation(&cfg)?;
    println!(
        "{} frames, {} tracks, labels per camera {:?}",
        summary.manifest.frames,
        summary.tracks.tracklets.iter().filter(|t| t.is_reportable()).count(),
        summary.label_counts
    );
    Ok(())
}

fn evaluate_cmd(gt: &Path, pred: &Path, threshold: f64, out: &Option<PathBuf>, name: &str) -> Result<(), Failure> {
    let gt: Vec<TrackRecord> = io::read_jsonl(gt).map_err(Failure::data)?;
    let pred: Vec<TrackRecord> = io::read_jsonl(pred).map_err(Failure::data)?;
    let report = evaluate(&FramePoints::from_records(&gt), &FramePoints::from_records(&pred), threshold).map_err(Failure::data)?;
    print!("{}", format_table(&[(name.to_string(), report)]));
    if let Some(out) = out {
        io::write_json(out, &report).map_err(Failure::data)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate { spec, out, noise_mm, marker_noise_px, no_color } => simulate(
            cli,
            spec,
            out,
            ExportOptions { noise_sigma_mm: *noise_mm, with_color: !no_color, marker_noise_px: *marker_noise_px },
        ),
        Command::Calibrate { observations, intrinsics, anchor, out, marker_side_mm, huber } => {
            calibrate_cmd(observations, intrinsics, *anchor, out, *marker_side_mm, *huber)
        }
        Command::Track { depth, calib, out } => track(cli, depth, calib, out),
        Command::Evaluate { gt, pred, threshold_mm, out, name } => evaluate_cmd(gt, pred, *threshold_mm, out, name),
        Command::ApplyEdits { tracks, edits, out } => {
            let fixed = apply_edits_files(tracks, edits, out).map_err(Failure::data)?;
            println!("{} tracks, digest {}", fixed.tracklets.len(), fixed.digest());
            Ok(())
        }
        Command::Serve { data, port } => {
            let rt = tokio::runtime::Runtime::new().map_err(Failure::data)?;
            rt.block_on(service::serve(data, *port)).map_err(Failure::data)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = cli.log_level.parse::<log::LevelFilter>();
    let Ok(level) = level else {
        eprintln!("error: invalid --log-level {:?}", cli.log_level);
        return ExitCode::from(2);
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("data error: {msg}");
            ExitCode::from(3)
        }
    }
}
