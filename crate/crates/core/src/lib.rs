//! Hybrid voxel-SDF / Gaussian-splat reconstruction for sparse-view capture.
//!
//! The pipeline couples two scene representations that repair each other's
//! weaknesses: a dense voxel signed-distance field is trained by volume
//! rendering to get the global shape, its cleaned mesh seeds a set of 3D
//! Gaussians for image rendering, and the splats in turn render images at
//! expanded camera poses that supervise a higher-resolution SDF refinement.
//!
//! Modules follow the data flow:
//!
//! * [`camera`] — pinhole model, rays, projection, camera JSON
//! * [`grid`] — dense SDF + color voxel grid, sampling, regularizers
//! * [`volume`] — differentiable SDF volume renderer and trainer
//! * [`mesh`] — marching cubes, floater removal, depth rasterization
//! * [`sampling`] — depth-based surface point sampling for splat init
//! * [`splat`] — CPU tile rasterizer for 3D Gaussians with backward pass
//! * [`poses`] — pose expansion by perturbation / spline interpolation
//! * [`metrics`] — chamfer / F1 / PSNR evaluation
//! * [`synthetic`] — analytic CSG scenes with sphere-traced ground truth
//! * [`pipeline`] — stage orchestration, dataset IO, reports

pub mod camera;
pub mod error;
pub mod grid;
pub mod img;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod ply;
pub mod poses;
pub mod sampling;
pub mod seeds;
pub mod splat;
pub mod synthetic;
pub mod volume;

pub use error::{Error, Result};
