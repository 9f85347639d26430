use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Largest range the sensor reports; anything beyond is treated as a dropout.
pub const MAX_RANGE_M: f32 = 20.0;

/// Pinhole intrinsics, zero distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = CameraIntrinsics { width, height, fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point, equal focal lengths.
    pub fn centered(width: u32, height: u32, focal: f64) -> Result<Self, GeometryError> {
        Self::new(width, height, focal, focal, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidParameter(format!(
                "image size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidParameter(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidParameter(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Ray direction through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: u32, v: u32) -> [f64; 3] {
        [(u as f64 - self.cx) / self.fx, (v as f64 - self.cy) / self.fy, 1.0]
    }
}

/// One depth image. Values are z-depth in meters, row-major; `0.0` marks an
/// invalid sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub intrinsics: CameraIntrinsics,
    pub timestamp_us: u64,
    pub sequence: u64,
    depth: Vec<f32>,
}

/// Maps non-finite, negative and out-of-range samples to the invalid marker.
#[inline]
pub fn sanitize_depth(d: f32) -> f32 {
    if d.is_finite() && d > 0.0 && d <= MAX_RANGE_M {
        d
    } else {
        0.0
    }
}

impl DepthFrame {
    pub fn new(
        intrinsics: CameraIntrinsics,
        timestamp_us: u64,
        sequence: u64,
        mut depth: Vec<f32>,
    ) -> Result<Self, GeometryError> {
        intrinsics.validate()?;
        if depth.len() != intrinsics.pixel_count() {
            return Err(GeometryError::InvalidParameter(format!(
                "depth grid has {} samples, expected {}x{}",
                depth.len(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        for d in depth.iter_mut() {
            *d = sanitize_depth(*d);
        }
        Ok(DepthFrame { intrinsics, timestamp_us, sequence, depth })
    }

    pub fn filled(intrinsics: CameraIntrinsics, value: f32) -> Result<Self, GeometryError> {
        let n = intrinsics.pixel_count();
        Self::new(intrinsics, 0, 0, vec![value; n])
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.width() + u]
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn into_depth(self) -> Vec<f32> {
        self.depth
    }

    /// Same frame with a replacement grid; the grid is sanitized.
    pub fn with_depth(&self, depth: Vec<f32>) -> Result<Self, GeometryError> {
        Self::new(self.intrinsics, self.timestamp_us, self.sequence, depth)
    }
}
