//! Differential contrastive gaze estimation.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`geometry`]: gaze angles, unit vectors and error measures
//! * [`backend`]: the pluggable vision-language encoder pair (plus a seeded stub)
//! * [`appearance`]: convolutional feature grids, token aggregation, the
//!   adaptive feature-refinement unit and the fusion baselines
//! * [`regressor`]: the MLP head and the parameter-free masked max-pool head
//! * [`semantic`]: image pairs, graded difference prompts and the alignment loss
//! * [`training`]: model assembly, the optimization loop, evaluation, checkpoints
//! * [`probe`]: the training-free prototype-based gaze estimator
//! * [`data`]: labeled datasets on disk and the synthetic generator
//! * [`config`]: flat `key = value` run configuration

pub mod appearance;
pub mod backend;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod ops;
pub mod probe;
pub mod regressor;
pub mod semantic;
pub mod training;

pub use error::{GazeError, Result};
pub use geometry::{angular_error, gaze_l1_difference, pitch_yaw_to_unit_vector, GazeDirection, UnitVector3};
