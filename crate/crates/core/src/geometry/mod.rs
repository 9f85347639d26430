//! Depth frames, filtering, back-projection and rigid-transform algebra.

mod camera;
mod cloud;
mod filter;
pub mod io;
mod kdtree;
mod normals;
mod plane;
mod transform;

use std::path::{Path, PathBuf};

pub use camera::{sanitize_depth, CameraIntrinsics, DepthFrame, MAX_RANGE_M};
pub use cloud::{
    backproject, backproject_indexed, voxel_downsample, voxel_key, voxel_subsample_indices, PointCloud,
};
pub use filter::{median_filter, occlusion_mask};
pub use kdtree::KdTree;
pub use normals::{estimate_normals, patch_from, SurfacePatch};
pub use plane::Plane;
pub use transform::{
    apply, compose, estimate_rigid_from_correspondences, fit_rigid, invert, RigidTransform, ROTATION_TOLERANCE,
};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GeometryError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        GeometryError::Io { path: path.to_path_buf(), source }
    }
}
