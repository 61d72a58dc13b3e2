//! Feature-metric pose refinement for self-supervised depth training.
//!
//! The crate bundles the pieces that sit between a depth network and a pose
//! network during training, without the networks themselves:
//!
//! - [`lie`]: SE(3) exponential/logarithm maps and pose algebra.
//! - [`camera`]: pinhole projection and the geometric Jacobian blocks.
//! - [`gridmap`]: dense H×W×C maps, bilinear sampling and the `.gmap` format.
//! - [`residual`]: the confidence-weighted robust feature alignment cost.
//! - [`solver`]: Levenberg-Marquardt refinement with IRLS reweighting.
//! - [`losses`]: warping, photometric, smoothness, pose and velocity losses.
//! - [`synth`]: analytic synthetic scenes and the scale-alignment experiment.
//! - [`metrics`]: depth metrics, scale statistics and odometry evaluation.

// `!(x > y)` is used on purpose so NaN falls into the rejecting branch;
// index loops mirror the per-channel formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod camera;
pub mod error;
pub mod gridmap;
pub mod lie;
pub mod losses;
pub mod metrics;
pub mod residual;
pub mod solver;
pub mod synth;

pub use camera::{CameraIntrinsics, Pixel};
pub use error::{Error, Result};
pub use gridmap::GridMap;
pub use lie::{SE3Pose, Twist};
pub use residual::{RefinementProblem, ResidualBundle, RobustKernel};
pub use solver::{refine_pose, RefinementConfig, RefinementTrace};
