//! Sensorless freehand 3D ultrasound reconstruction.
//!
//! The crate estimates inter-frame rigid motion from an untracked sequence of
//! 2D ultrasound frames and compounds the frames into a voxel volume. It is
//! organised by pipeline stage:
//!
//! - [`geom`]: rigid-transform algebra (4x4 poses, 6-DOF vectors, frame corners)
//! - [`io`]: on-disk scan format and windowing into labelled training samples
//! - [`phantom`]: synthetic speckle phantoms and simulated freehand sweeps
//! - [`baselines`]: linear-motion and speckle-decorrelation estimators
//! - [`nn`]: a small multi-frame convolutional regressor with attention,
//!   trained with MSE plus a case-wise Pearson correlation loss
//! - [`reconstruct`]: sliding-window inference and volume compounding
//! - [`metrics`]: corner distance error, final drift and per-DOF correlation
//! - [`benchmark`]: the fixed synthetic comparison setup
//! - [`cli`]: the `usrecon` batch command line
//!
//! Runnable walkthroughs for each stage live in `examples/`:
//!
//! ```bash
//! cargo run --release -p usrecon --example pose_algebra
//! cargo run --release -p usrecon --example simulate_sweep
//! cargo run --release -p usrecon --example decorrelation_baseline
//! cargo run --release -p usrecon --example correlation_loss
//! cargo run --release -p usrecon --example train_regressor
//! cargo run --release -p usrecon --example compound_volume
//! cargo run --release -p usrecon --example compare_methods
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod benchmark;
pub mod cli;
pub mod error;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod reconstruct;
pub(crate) mod stats;

pub use error::{Error, Result};
pub use geom::{DofVector, FrameGeometry, Pose};
pub use io::{Frame, ScanSequence, Window};
pub use phantom::{TrajectoryKind, TrajectorySpec, Volume};
pub use reconstruct::{Estimator, MotionEstimator};

