//! Automatic person annotation for multi-camera RGB-D rigs.
//!
//! Depth streams from a calibrated rig are fused into a top-down heightmap,
//! people are detected and tracked on the ground plane, and the tracks are
//! projected back into every camera as 2D boxes. A synthetic scene
//! simulator provides exact ground truth for every stage.

pub mod annotate;
pub mod calibration;
pub mod detect;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod project;
pub mod simulate;
pub mod track;
