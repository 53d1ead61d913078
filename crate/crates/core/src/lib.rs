//! Parametric hand mesh engine.
//!
//! A hand is described by a low-dimensional set of shape coefficients, per-joint
//! axis-angle rotations and a weak-perspective camera. This crate provides:
//!
//! - [`model`]: the hand model (template, blendshapes, skinning) and a procedural
//!   toy model with the same structure as production hand models;
//! - [`pose`]: joint regression, weak-perspective projection and camera estimation
//!   from paired 2D/3D annotations;
//! - [`losses`], [`heatmap`], [`raster`]: every term of the fitting objective;
//! - [`fitter`]: staged gradient-based recovery of shape, pose and camera from
//!   annotations (2D keypoints, 3D joints, silhouettes);
//! - [`metrics`]: MPJPE, PCK/AUC and mask IoU;
//! - [`io`] and [`cli`]: file formats and the `hamr` command line tool.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod fitter;
pub mod heatmap;
pub mod io;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod pose;
pub mod raster;
pub mod synth;

pub use error::{HamrError, Result};
pub use fitter::{fit, init_params, loss_and_grad, FitResult, ParamState, Sample, Schedule};
pub use losses::{LossBreakdown, LossWeights};
pub use model::{lbs_forward, HandModel, Mesh, PoseParams, ShapeParams};
pub use pose::{CameraParams, Joints3D, Keypoints2D};
