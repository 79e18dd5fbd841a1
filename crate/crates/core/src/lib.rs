//! Side-scan sonar SLAM.
//!
//! An offline pipeline that turns raw side-scan pings plus dead-reckoning
//! poses into a drift-corrected AUV trajectory:
//!
//! 1. [`sonar_image`] stacks pings into waterfall images, applies the
//!    canonical transformation (Lambertian intensity correction and
//!    slant-to-ground-range resampling) and geo-references every pixel.
//! 2. [`association`] detects grid-distributed corners, describes them with
//!    fixed-orientation gradient histograms, and matches them across
//!    overlapping images with a geo-referenced near-neighbor search followed
//!    by a sliding row-compatibility RANSAC.
//! 3. [`estimation`] turns each matched keypoint pair into a relative-pose
//!    constraint between the two pings by solving a small nonlinear least
//!    squares problem over the second ping pose and the shared landmark.
//! 4. [`pose_graph`] fuses the dead-reckoning chain with the loop-closure
//!    constraints in a sparse Levenberg-Marquardt solve over all ping poses.
//!
//! [`simulator`] generates synthetic bathymetry, surveys and drifted
//! dead-reckoning so the whole pipeline can be exercised and measured
//! without real sonar data, and [`evaluation`] implements the metrics
//! (landmark consistency error, ATE, end-point error, landmark depth error).
//! [`pipeline`] wires everything into the `simulate` / `run` / `eval`
//! commands exposed by the CLI.

pub mod association;
pub mod config;
pub mod estimation;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod pose_graph;
pub mod simulator;
pub mod sonar_image;

use thiserror::Error;

/// Error type shared by the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// An operation was called with inputs violating its preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A file could not be parsed.
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    /// The optimizer could not make progress (e.g. indefinite normal equations).
    #[error("solver error: {0}")]
    Solver(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
