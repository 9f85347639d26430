//! Bore-to-model registration: global initialisation, ICP refinement and the
//! accept/retry gate.

mod calibrate;
mod descriptor;
mod fine;
mod global;
mod icp;

use serde::{Deserialize, Serialize};

use crate::config::{Config, ConfigError};
use crate::geometry::{GeometryError, RigidTransform};
use crate::segmentation::SegmentationError;

pub use calibrate::{
    calibrate, preprocess_frame, CalibrationConfig, CalibrationOutcome, CalibrationSession, CalibrationStatus,
};
pub use descriptor::{compute_descriptors, Descriptor, DESCRIPTOR_LEN};
pub use fine::refine_point_to_plane;
pub use global::{global_register, global_register_detailed, global_register_oriented, GlobalMatch};
pub use icp::{icp_refine, icp_refine_traced, match_statistics, mean_nearest_distance};

#[derive(Debug, thiserror::Error)]
pub enum RegistrationError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("global registration failed: {0}")]
    GlobalFailed(String),
    #[error("ICP diverged after {} iteration(s): no correspondences within range", .last.icp_iterations)]
    IcpDiverged { last: Box<RegistrationResult> },
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub max_icp_iterations: usize,
    /// ICP stops once the truncated RMS distance drops by less than this.
    pub convergence_eps: f64,
    pub max_correspondence_dist: f64,
    pub validation_threshold: f64,
    /// Minimum share of source points matched for the gate to accept.
    pub min_matched_fraction: f64,
    /// Source keypoints used for descriptor matching; also the minimum cloud
    /// size after downsampling.
    pub global_sample_count: usize,
    /// Downsampling voxel of the global step; the consistency tolerance is twice this.
    pub global_voxel: f64,
    /// Support radius of the local descriptor.
    pub descriptor_radius: f64,
    /// Descriptor-space neighbours kept per source keypoint.
    pub correspondences_per_point: usize,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            max_icp_iterations: 60,
            convergence_eps: 1e-5,
            max_correspondence_dist: 0.05,
            validation_threshold: 0.02,
            min_matched_fraction: 0.3,
            global_sample_count: 300,
            global_voxel: 0.025,
            descriptor_radius: 0.125,
            correspondences_per_point: 3,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let positive = [
            ("convergence_eps_m", self.convergence_eps),
            ("max_correspondence_dist_m", self.max_correspondence_dist),
            ("validation_threshold_m", self.validation_threshold),
            ("global_voxel_m", self.global_voxel),
            ("descriptor_radius_m", self.descriptor_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RegistrationError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_icp_iterations == 0 || self.global_sample_count < 3 || self.correspondences_per_point == 0 {
            return Err(RegistrationError::InvalidParameter(
                "max_icp_iterations and correspondences_per_point must be at least 1, global_sample_count at least 3"
                    .into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_matched_fraction) {
            return Err(RegistrationError::InvalidParameter("min_matched_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Reads `[registration]`, keeping defaults for absent keys.
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let mut c = RegistrationConfig::default();
        if let Some(s) = cfg.section("registration") {
            s.read_into("max_icp_iterations", &mut c.max_icp_iterations)?;
            s.read_into("convergence_eps_m", &mut c.convergence_eps)?;
            s.read_into("max_correspondence_dist_m", &mut c.max_correspondence_dist)?;
            s.read_into("validation_threshold_m", &mut c.validation_threshold)?;
            s.read_into("min_matched_fraction", &mut c.min_matched_fraction)?;
            s.read_into("global_sample_count", &mut c.global_sample_count)?;
            s.read_into("global_voxel_m", &mut c.global_voxel)?;
            s.read_into("descriptor_radius_m", &mut c.descriptor_radius)?;
            s.read_into("correspondences_per_point", &mut c.correspondences_per_point)?;
            s.read_into("seed", &mut c.seed)?;
            c.validate().map_err(|e| s.invalid("registration", e.to_string()))?;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Source (live) frame to target (model) frame.
    pub transform: RigidTransform,
    pub mean_matched_distance: f64,
    pub matched_fraction: f64,
    pub icp_iterations: usize,
    pub global_inlier_count: usize,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accepted,
    RetryRequested,
}

/// The accept/retry gate: accepted iff the mean matched distance is within
/// `threshold` and enough of the source found a partner.
pub fn validate(result: &RegistrationResult, threshold: f64, min_matched_fraction: f64) -> Verdict {
    if result.mean_matched_distance <= threshold && result.matched_fraction >= min_matched_fraction {
        Verdict::Accepted
    } else {
        Verdict::RetryRequested
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(d: f64, frac: f64) -> RegistrationResult {
        RegistrationResult {
            transform: RigidTransform::identity(),
            mean_matched_distance: d,
            matched_fraction: frac,
            icp_iterations: 1,
            global_inlier_count: 0,
            elapsed_s: 0.0,
        }
    }

    #[test]
    fn gate() {
        assert_eq!(validate(&result(0.013, 0.9), 0.02, 0.3), Verdict::Accepted);
        assert_eq!(validate(&result(0.025, 0.9), 0.02, 0.3), Verdict::RetryRequested);
        assert_eq!(validate(&result(0.005, 0.1), 0.02, 0.3), Verdict::RetryRequested);
        assert_eq!(validate(&result(0.02, 0.3), 0.02, 0.3), Verdict::Accepted);
    }

    #[test]
    fn config_defaults_and_overrides() {
        let d = RegistrationConfig::default();
        assert_eq!(d.validation_threshold, 0.02);
        let cfg = Config::parse("[registration]\nvalidation_threshold_m = 0.03\nseed = 4\n").unwrap();
        let c = RegistrationConfig::from_config(&cfg).unwrap();
        assert_eq!((c.validation_threshold, c.seed, c.max_icp_iterations), (0.03, 4, 60));
        let bad = Config::parse("[registration]\nmax_icp_iterations = 0\n").unwrap();
        assert!(RegistrationConfig::from_config(&bad).is_err());
    }
}
