//! Pinhole camera model: intrinsics, image metadata, per-mille to pixel
//! conversion, and the projection / back-projection pair.
//!
//! Camera frame is +X right, +Y down, +Z forward. All arithmetic is `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by the camera model.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid image size {width}x{height}")]
    InvalidImageSize { width: u32, height: u32 },
    #[error("rescale factor must be positive and finite, got {0}")]
    InvalidRescale(f64),
    #[error("normalized coordinate {0} outside [0, 1000]")]
    NormalizedOutOfRange(f64),
    #[error("depth must be positive and finite, got {0}")]
    NonPositiveDepth(f64),
    #[error("point is behind the camera (Z = {0})")]
    BehindCamera(f64),
}

/// Focal lengths and principal point, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = CameraError;

    fn try_from(raw: RawIntrinsics) -> Result<Self, Self::Error> {
        CameraIntrinsics::new(raw.fx, raw.fy, raw.cx, raw.cy)
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, CameraError> {
        if !(fx.is_finite() && fx > 0.0) || !(fy.is_finite() && fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(CameraError::InvalidIntrinsics(format!("principal point must be finite, got ({cx}, {cy})")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Multiplies all four parameters by `s`.
    pub fn scaled(&self, s: RescaleFactor) -> Self {
        let s = s.value();
        Self { fx: self.fx * s, fy: self.fy * s, cx: self.cx * s, cy: self.cy * s }
    }
}

/// Image width and height in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawImageMeta")]
pub struct ImageMeta {
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImageMeta {
    width: u32,
    height: u32,
}

impl TryFrom<RawImageMeta> for ImageMeta {
    type Error = CameraError;

    fn try_from(raw: RawImageMeta) -> Result<Self, Self::Error> {
        ImageMeta::new(raw.width, raw.height)
    }
}

impl ImageMeta {
    pub fn new(width: u32, height: u32) -> Result<Self, CameraError> {
        if width == 0 || height == 0 {
            return Err(CameraError::InvalidImageSize { width, height });
        }
        Ok(Self { width, height })
    }

    /// Image size after resizing by `s`, rounded half away from zero and
    /// never smaller than one pixel.
    pub fn scaled(&self, s: RescaleFactor) -> Self {
        let scale = |n: u32| ((n as f64 * s.value()).round() as u32).max(1);
        Self { width: scale(self.width), height: scale(self.height) }
    }
}

/// A point in the camera frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3D {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self::new(self.x * alpha, self.y * alpha, self.z * alpha)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Positive multiplier applied to intrinsics and pixel space.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RescaleFactor(f64);

impl RescaleFactor {
    pub const IDENTITY: RescaleFactor = RescaleFactor(1.0);

    pub fn new(s: f64) -> Result<Self, CameraError> {
        if s.is_finite() && s > 0.0 {
            Ok(Self(s))
        } else {
            Err(CameraError::InvalidRescale(s))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for RescaleFactor {
    type Error = CameraError;

    fn try_from(s: f64) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<RescaleFactor> for f64 {
    fn from(s: RescaleFactor) -> f64 {
        s.0
    }
}

/// The eleven evaluation factors 0.5, 0.6, ..., 1.5.
pub fn rescale_grid() -> Vec<RescaleFactor> {
    // Built from tenths so every entry is the nearest double to its decimal.
    (5..=15).map(|t| RescaleFactor(t as f64 / 10.0)).collect()
}

/// Rescales intrinsics and image size together. Metric quantities are
/// untouched by this transform.
pub fn rescale_intrinsics(k: &CameraIntrinsics, meta: &ImageMeta, s: RescaleFactor) -> (CameraIntrinsics, ImageMeta) {
    (k.scaled(s), meta.scaled(s))
}

/// Converts per-mille normalized coordinates to absolute pixels:
/// `round(u_norm / 1000 * W)`, rounding half away from zero.
pub fn normalized_to_absolute(u_norm: f64, v_norm: f64, meta: &ImageMeta) -> Result<(i64, i64), CameraError> {
    Ok((normalized_axis_to_absolute(u_norm, meta.width)?, normalized_axis_to_absolute(v_norm, meta.height)?))
}

/// Single-axis form of [`normalized_to_absolute`].
pub fn normalized_axis_to_absolute(norm: f64, extent: u32) -> Result<i64, CameraError> {
    if !(0.0..=1000.0).contains(&norm) {
        return Err(CameraError::NormalizedOutOfRange(norm));
    }
    Ok((norm / 1000.0 * extent as f64).round() as i64)
}

/// Inverse direction of [`normalized_axis_to_absolute`]: pixels to integer
/// per-mille, rounding half away from zero.
pub fn absolute_axis_to_normalized(abs: f64, extent: u32) -> i64 {
    (abs / extent as f64 * 1000.0).round().clamp(0.0, 1000.0) as i64
}

/// Lifts pixel `(u_c, v_c)` at metric depth `z_bar` into the camera frame:
/// `X = (u_c - c_x) * z / f_x`, `Y = (v_c - c_y) * z / f_y`, `Z = z`.
pub fn back_project(u_c: f64, v_c: f64, z_bar: f64, k: &CameraIntrinsics) -> Result<Point3D, CameraError> {
    if !(z_bar.is_finite() && z_bar > 0.0) {
        return Err(CameraError::NonPositiveDepth(z_bar));
    }
    Ok(Point3D::new((u_c - k.cx) * z_bar / k.fx, (v_c - k.cy) * z_bar / k.fy, z_bar))
}

/// Forward pinhole map, unrounded.
pub fn project_point(p: &Point3D, k: &CameraIntrinsics) -> Result<(f64, f64), CameraError> {
    if p.z.is_nan() || p.z <= 0.0 {
        return Err(CameraError::BehindCamera(p.z));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}
