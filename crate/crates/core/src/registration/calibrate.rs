use std::time::Instant;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    global_register_oriented, icp_refine, match_statistics, refine_point_to_plane, mean_nearest_distance, validate, RegistrationConfig,
    RegistrationError, RegistrationResult, Verdict,
};
use crate::config::{Config, ConfigError};
use crate::geometry::{
    backproject, median_filter, occlusion_mask, voxel_downsample, DepthFrame, GeometryError, PointCloud, RigidTransform,
};
use crate::segmentation::{segment_scene, SegmentationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub median_window: usize,
    /// Depth jump that marks an occlusion boundary.
    pub occlusion_jump: f64,
    /// Voxel size of the downsampling applied before segmentation.
    pub voxel: f64,
    /// Scans the retry loop requests before giving up.
    pub max_attempts: usize,
    /// Model-frame point in front of the bore entrance. Model normals are
    /// oriented toward it and live normals toward the camera, so the global
    /// step cannot return a pose that sees the bore from behind.
    pub model_viewpoint: [f64; 3],
    /// Set the roll about the bore axis (model `z`) so the table normal maps
    /// to model `+y`. The bore alone is nearly symmetric about its axis.
    pub level_with_table: bool,
    /// Point-to-plane steps after ICP; 0 skips the stage.
    pub fine_iterations: usize,
    pub segmentation: SegmentationConfig,
    pub registration: RegistrationConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            median_window: 3,
            occlusion_jump: 0.1,
            voxel: 0.01,
            max_attempts: 5,
            model_viewpoint: [0.0, 0.0, 1.0],
            level_with_table: true,
            fine_iterations: 30,
            segmentation: SegmentationConfig::default(),
            registration: RegistrationConfig::default(),
        }
    }
}

impl CalibrationConfig {
    /// Reads `[calibration]` (`median_window`, `occlusion_jump_m`, `voxel_m`,
    /// `max_attempts`, `level_with_table`, `model_viewpoint`, `fine_iterations`) plus the `[segmentation]` and `[registration]` sections.
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let mut c = CalibrationConfig {
            segmentation: SegmentationConfig::from_config(cfg)?,
            registration: RegistrationConfig::from_config(cfg)?,
            ..CalibrationConfig::default()
        };
        if let Some(s) = cfg.section("calibration") {
            s.read_into("median_window", &mut c.median_window)?;
            s.read_into("occlusion_jump_m", &mut c.occlusion_jump)?;
            s.read_into("voxel_m", &mut c.voxel)?;
            s.read_into("max_attempts", &mut c.max_attempts)?;
            s.read_into("level_with_table", &mut c.level_with_table)?;
            s.read_into("fine_iterations", &mut c.fine_iterations)?;
            if let Some(v) = s.vec3("model_viewpoint")? {
                c.model_viewpoint = v;
            }
            if ![3, 5, 7].contains(&c.median_window) {
                return Err(s.invalid("median_window", "must be 3, 5 or 7"));
            }
            if !(c.occlusion_jump > 0.0 && c.voxel > 0.0) || c.max_attempts == 0 {
                return Err(s.invalid("calibration", "occlusion_jump_m and voxel_m must be positive, max_attempts ≥ 1"));
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibrationStatus {
    Accepted,
    RetryRequested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub status: CalibrationStatus,
    /// Absent when the attempt failed before ICP produced an estimate.
    pub result: Option<RegistrationResult>,
    pub attempts: usize,
    /// Why a retry was requested.
    pub cause: Option<String>,
    /// Transform applied to the patient cloud; equal to the bore transform.
    pub patient_transform: Option<RigidTransform>,
    /// Mean distance from the aligned patient cloud to the patient model. Reported, not gated.
    pub patient_residual: Option<f64>,
    pub bore_points: usize,
    pub patient_points: usize,
    pub elapsed_s: f64,
}

impl CalibrationOutcome {
    pub fn accepted(&self) -> bool {
        self.status == CalibrationStatus::Accepted
    }

    /// Result record: row-major rotation, translation and the gate statistics.
    pub fn to_json(&self) -> serde_json::Value {
        let status = match self.status {
            CalibrationStatus::Accepted => "accepted",
            CalibrationStatus::RetryRequested => "retry_requested",
        };
        let mut v = json!({
            "status": status,
            "attempts": self.attempts,
            "elapsed_s": self.elapsed_s,
            "cause": self.cause,
            "patient_residual_m": self.patient_residual,
        });
        if let Some(r) = &self.result {
            let m = r.transform.rotation();
            let rows: Vec<[f64; 3]> = (0..3).map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]]).collect();
            let t = r.transform.translation();
            v["rotation"] = json!(rows);
            v["translation"] = json!([t.x, t.y, t.z]);
            v["mean_matched_distance_m"] = json!(r.mean_matched_distance);
            v["matched_fraction"] = json!(r.matched_fraction);
            v["icp_iterations"] = json!(r.icp_iterations);
            v["global_inlier_count"] = json!(r.global_inlier_count);
        }
        v
    }
}

/// Median filter, occlusion mask, back-projection and voxel downsampling.
pub fn preprocess_frame(frame: &DepthFrame, cfg: &CalibrationConfig) -> Result<PointCloud, GeometryError> {
    let filtered = median_filter(frame, cfg.median_window)?;
    let mask = occlusion_mask(&filtered, cfg.occlusion_jump)?;
    voxel_downsample(&backproject(&filtered, Some(&mask)), cfg.voxel)
}

/// Rotates `t` about the model `z` axis so that the camera-frame table
/// normal `n` maps into the model `yz` plane with positive `y`. Left alone
/// when the mapped normal is nearly parallel to the axis.
fn level_roll(t: &RigidTransform, n: &Vector3<f64>) -> RigidTransform {
    let m = t.transform_vector(n);
    if m.x.hypot(m.y) < 0.5 {
        return *t;
    }
    let phi = m.x.atan2(m.y);
    RigidTransform::from_axis_angle(Vector3::z(), phi, Vector3::zeros()).compose(t)
}

/// Calibration state across scans: the models and the attempt counter.
#[derive(Debug, Clone)]
pub struct CalibrationSession {
    cfg: CalibrationConfig,
    scanner_model: PointCloud,
    patient_model: PointCloud,
    attempts: usize,
}

impl CalibrationSession {
    pub fn new(
        scanner_model: PointCloud,
        patient_model: PointCloud,
        cfg: CalibrationConfig,
    ) -> Result<Self, RegistrationError> {
        if scanner_model.is_empty() || patient_model.is_empty() {
            return Err(RegistrationError::InvalidParameter("scanner and patient models must be non-empty".into()));
        }
        cfg.registration.validate()?;
        cfg.segmentation.validate()?;
        Ok(CalibrationSession { cfg, scanner_model, patient_model, attempts: 0 })
    }

    pub fn attempts(&self) -> usize {
        self.attempts
    }

    pub fn config(&self) -> &CalibrationConfig {
        &self.cfg
    }

    /// One attempt on the most recent frame of `frames`. Pipeline failures
    /// come back as `RetryRequested` with a cause; only an empty frame list
    /// is an error.
    pub fn attempt(&mut self, frames: &[DepthFrame]) -> Result<CalibrationOutcome, RegistrationError> {
        let Some(frame) = frames.last() else {
            return Err(RegistrationError::InvalidParameter("no frames supplied".into()));
        };
        self.attempts += 1;
        let start = Instant::now();
        let mut out = CalibrationOutcome {
            status: CalibrationStatus::RetryRequested,
            result: None,
            attempts: self.attempts,
            cause: None,
            patient_transform: None,
            patient_residual: None,
            bore_points: 0,
            patient_points: 0,
            elapsed_s: 0.0,
        };
        let res = self.run_pipeline(frame, &mut out);
        out.elapsed_s = start.elapsed().as_secs_f64();
        if let Some(r) = out.result.as_mut() {
            r.elapsed_s = out.elapsed_s;
        }
        if let Err(e) = res {
            out.cause = Some(e.to_string());
        }
        log::info!(
            "calibration attempt {}: {:?} ({:.3} s){}",
            out.attempts,
            out.status,
            out.elapsed_s,
            out.cause.as_deref().map(|c| format!(": {c}")).unwrap_or_default()
        );
        Ok(out)
    }

    fn run_pipeline(&self, frame: &DepthFrame, out: &mut CalibrationOutcome) -> Result<(), RegistrationError> {
        let cloud = preprocess_frame(frame, &self.cfg)?;
        let seg = segment_scene(&cloud, &self.cfg.segmentation)?;
        out.bore_points = seg.bore.len();
        out.patient_points = seg.patient.len();
        let reg = &self.cfg.registration;
        let [vx, vy, vz] = self.cfg.model_viewpoint;
        let viewpoints = (Point3::origin(), Point3::new(vx, vy, vz));
        let global = global_register_oriented(&seg.bore, &self.scanner_model, Some(viewpoints), reg)?;
        let table_normal = seg.table_plane.normal();
        let level = |t: &RigidTransform| if self.cfg.level_with_table { level_roll(t, table_normal) } else { *t };
        let mut result = match icp_refine(&seg.bore, &self.scanner_model, &level(&global.transform), reg) {
            Ok(r) => r,
            Err(RegistrationError::IcpDiverged { last }) => {
                out.result = Some((*last).clone());
                return Err(RegistrationError::IcpDiverged { last });
            }
            Err(e) => return Err(e),
        };
        result.global_inlier_count = global.inliers.len();
        if self.cfg.level_with_table || self.cfg.fine_iterations > 0 {
            // ICP may slide a little along the near-symmetric roll direction.
            let mut t = level(&result.transform);
            if self.cfg.fine_iterations > 0 {
                let locked = self.cfg.level_with_table.then(Vector3::z);
                t = refine_point_to_plane(
                    &seg.bore,
                    &self.scanner_model,
                    &t,
                    reg.max_correspondence_dist,
                    self.cfg.fine_iterations,
                    locked,
                );
            }
            result.transform = t;
            (result.mean_matched_distance, result.matched_fraction) =
                match_statistics(&seg.bore, &self.scanner_model, &result.transform, reg.max_correspondence_dist);
        }
        let verdict = validate(&result, reg.validation_threshold, reg.min_matched_fraction);
        out.result = Some(result.clone());
        match verdict {
            Verdict::Accepted => {
                out.status = CalibrationStatus::Accepted;
                out.patient_transform = Some(result.transform);
                out.patient_residual = mean_nearest_distance(&result.transform.apply(&seg.patient), &self.patient_model);
                Ok(())
            }
            Verdict::RetryRequested => {
                out.cause = Some(format!(
                    "validation failed: mean matched distance {:.4} m (limit {:.4} m), matched fraction {:.3} (minimum {:.3})",
                    result.mean_matched_distance, reg.validation_threshold, result.matched_fraction, reg.min_matched_fraction
                ));
                Ok(())
            }
        }
    }

    /// Retry loop: asks `next_scan` for fresh frames (given the 1-based
    /// attempt number) until an attempt is accepted or `max_attempts` is used up.
    pub fn run<F>(&mut self, mut next_scan: F) -> Result<CalibrationOutcome, RegistrationError>
    where
        F: FnMut(usize) -> Vec<DepthFrame>,
    {
        loop {
            let frames = next_scan(self.attempts + 1);
            let out = self.attempt(&frames)?;
            if out.accepted() || self.attempts >= self.cfg.max_attempts {
                return Ok(out);
            }
        }
    }
}

/// Single attempt on `scene_frames` with a fresh session.
pub fn calibrate(
    scene_frames: &[DepthFrame],
    scanner_model: &PointCloud,
    patient_model: &PointCloud,
    cfg: &CalibrationConfig,
) -> Result<CalibrationOutcome, RegistrationError> {
    CalibrationSession::new(scanner_model.clone(), patient_model.clone(), *cfg)?.attempt(scene_frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{
        default_intrinsics, render_depth, sample_capsule_surface, sample_model_cloud, ScannerModel, SceneConfig,
    };

    fn models() -> (PointCloud, PointCloud) {
        let scanner = sample_model_cloud(&ScannerModel::default(), 40000, 99);
        let patient = sample_capsule_surface(&SceneConfig::default().torso, 5000, 98);
        (scanner, patient)
    }

    #[test]
    fn oracle_scene_is_accepted_first_time() {
        let (scanner, patient) = models();
        let (frame, gt) = render_depth(&SceneConfig::random(11, 0.003, 0.05), &default_intrinsics());
        let out = calibrate(&[frame], &scanner, &patient, &CalibrationConfig::default()).unwrap();
        assert!(out.accepted(), "{:?}", out.cause);
        assert_eq!(out.attempts, 1);
        let r = out.result.unwrap();
        assert!(r.transform.translation_distance_to(&gt.camera_to_scanner) <= 0.02);
        assert_eq!(out.patient_transform, Some(r.transform));
        assert!(out.patient_residual.unwrap() < 0.02);
    }

    #[test]
    fn noiseless_round_trip() {
        let (scanner, patient) = models();
        let (frame, gt) = render_depth(&SceneConfig::random(3, 0.0, 0.0), &default_intrinsics());
        let out = calibrate(&[frame], &scanner, &patient, &CalibrationConfig::default()).unwrap();
        let t = out.result.unwrap().transform;
        assert!(t.translation_distance_to(&gt.camera_to_scanner) <= 1e-4);
    }

    #[test]
    fn accepted_outcome_rechecks_independently() {
        let (scanner, patient) = models();
        let (frame, _) = render_depth(&SceneConfig::random(5, 0.003, 0.05), &default_intrinsics());
        let cfg = CalibrationConfig::default();
        let out = calibrate(&[frame.clone()], &scanner, &patient, &cfg).unwrap();
        assert!(out.accepted());
        let bore = segment_scene(&preprocess_frame(&frame, &cfg).unwrap(), &cfg.segmentation).unwrap().bore;
        let d = mean_nearest_distance(&out.result.unwrap().transform.apply(&bore), &scanner).unwrap();
        assert!(d <= cfg.registration.validation_threshold);
    }

    #[test]
    fn retry_loop_asks_for_a_new_scan() {
        let (scanner, patient) = models();
        let k = default_intrinsics();
        let mut session = CalibrationSession::new(scanner, patient, CalibrationConfig::default()).unwrap();
        let mut requested = Vec::new();
        let out = session
            .run(|attempt| {
                requested.push(attempt);
                // The first scan is blank.
                let dropout = if attempt == 1 { 1.0 } else { 0.05 };
                vec![render_depth(&SceneConfig::random(attempt as u64, 0.003, dropout), &k).0]
            })
            .unwrap();
        assert!(out.accepted());
        assert_eq!(out.attempts, 2);
        assert_eq!(requested, vec![1, 2]);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let (scanner, patient) = models();
        let cfg = CalibrationConfig { max_attempts: 3, ..CalibrationConfig::default() };
        let mut session = CalibrationSession::new(scanner, patient, cfg).unwrap();
        let k = default_intrinsics();
        let out = session.run(|a| vec![render_depth(&SceneConfig::random(a as u64, 0.0, 1.0), &k).0]).unwrap();
        assert_eq!(out.status, CalibrationStatus::RetryRequested);
        assert_eq!(out.attempts, 3);
        assert!(out.cause.is_some());
        assert_eq!(out.to_json()["status"], "retry_requested");
    }

    #[test]
    fn empty_frame_list_is_an_error() {
        let (scanner, patient) = models();
        assert!(matches!(
            calibrate(&[], &scanner, &patient, &CalibrationConfig::default()),
            Err(RegistrationError::InvalidParameter(_))
        ));
    }

    #[test]
    fn config_section() {
        let cfg = Config::parse(
            "[calibration]\nmedian_window = 5\nmodel_viewpoint = 0, 0, 2\nlevel_with_table = false\n[registration]\nseed = 3\n",
        )
        .unwrap();
        let c = CalibrationConfig::from_config(&cfg).unwrap();
        assert_eq!((c.median_window, c.model_viewpoint, c.level_with_table, c.registration.seed), (5, [0.0, 0.0, 2.0], false, 3));
        assert!(CalibrationConfig::from_config(&Config::parse("[calibration]\nmedian_window = 4\n").unwrap()).is_err());
    }
}
