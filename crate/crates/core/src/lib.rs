//! Differentiable LiDAR-only scene reconstruction and novel space-time view synthesis.
//!
//! The library fits a 4D hybrid neural field (multi-scale orthogonal feature
//! planes plus multi-level hashed voxel grids, each split into static and
//! dynamic parts) to a sequence of LiDAR range scans, regularized by a scene
//! flow MLP, and renders depth / intensity / ray-drop range images at
//! arbitrary sensor poses, times and beam configurations. A runtime-optimized
//! residual U-Net refines the rendered ray-drop mask globally.
//!
//! Pipeline: [`data`] loads or synthesizes a scene, [`sensor`] turns scans
//! into rays and point clouds, [`model`] evaluates the field along rays and
//! [`render`] integrates them, [`train`] runs the two-stage optimization
//! ([`unet`] is stage two), and [`metrics`] scores held-out frames.

pub mod data;
pub mod error;
pub mod field;
pub mod flow;
pub mod img;
pub mod kdtree;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod sensor;
pub mod synth;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use img::Image;
pub use sensor::{PointCloud, RangeScan, Ray, SceneScale, SensorConfig, SensorPose};
