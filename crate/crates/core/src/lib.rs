//! Differentiable articulated body model and fitting toolkit.
//!
//! The crate covers the forward model (blendshapes, forward kinematics and
//! linear blend skinning with analytic derivatives), a weak-perspective
//! projection with a soft silhouette rasterizer, the supervision losses,
//! evaluation metrics, a synthetic dataset generator and a robust
//! single-stage fitter with an optional pose anchor.

pub mod body_model;
pub mod datagen;
pub mod error;
pub mod fitter;
pub mod losses;
pub mod metrics;
pub mod renderer;
pub mod rng;
pub mod rotation;

pub use body_model::{BodyModel, JointSet, Mesh, PoseParams, ShapeParams};
pub use error::{Error, Result};
pub use renderer::{Camera, Keypoints2D, Silhouette};

/// 3-vector of model-space coordinates.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 2-vector of image-space coordinates (pixels).
pub type Vec2 = nalgebra::Vector2<f64>;
/// 3x3 matrix.
pub type Mat3 = nalgebra::Matrix3<f64>;
