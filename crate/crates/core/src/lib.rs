//! Equation-anchored single-image 3D localization toolkit.
//!
//! Camera intrinsics and sampled metric depths are treated as variables of
//! the pinhole back-projection
//! `X = (u_c - c_x) * Z / f_x`, `Y = (v_c - c_y) * Z / f_y`. The crate provides the geometry, the two spatial tools, the
//! tool-call wire protocol and server, a deterministic reasoning executor,
//! reasoning-trace generation and verification, and the evaluation metrics
//! with the camera-rescale sweep.

pub mod camera;
pub mod eval;
pub mod geometry;
pub mod protocol;
pub mod provenance;
pub mod reasoner;
pub mod scene;
pub mod synthetic;
pub mod tools;
pub mod trace;

pub use camera::{CameraIntrinsics, ImageMeta, Point3D, RescaleFactor};
pub use geometry::{Box2D, Box3D, IoUResult};
