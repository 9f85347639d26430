//! Parametric MRI room used as a ground-truth oracle.
//!
//! World frame: `+y` up. The scanner's local frame has the bore axis on `z`,
//! the face plate in the plane `z = 0` facing `+z`, and the bore interior at
//! `z ∈ [-bore_length, 0]`. Both the face plate and the bore shell stop at
//! `floor_height` (the patient table level), so the scanner surface seen by
//! the camera has no rotational symmetry about its axis.

mod render;
mod sample;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ConfigError};
use crate::geometry::{CameraIntrinsics, Plane, RigidTransform};

pub use render::{render_depth, scanner_surface_distance, GroundTruth, Label};
pub use sample::{sample_capsule_surface, sample_model_cloud};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScannerModel {
    pub bore_radius: f64,
    pub bore_length: f64,
    /// Outer radius of the annular face plate around the bore opening.
    pub face_outer_radius: f64,
    /// Height (local `y`) below which the shell and face plate are hidden by the table.
    pub floor_height: f64,
    /// Scanner local frame to world.
    pub pose: RigidTransform,
}

impl Default for ScannerModel {
    fn default() -> Self {
        ScannerModel {
            bore_radius: 0.35,
            bore_length: 1.6,
            face_outer_radius: 0.6,
            floor_height: -0.2,
            pose: RigidTransform::identity(),
        }
    }
}

impl ScannerModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.bore_radius > 0.0 && self.bore_radius < self.face_outer_radius) {
            return Err(format!(
                "need 0 < bore_radius ({}) < face_outer_radius ({})",
                self.bore_radius, self.face_outer_radius
            ));
        }
        if !(self.bore_length > 0.0) {
            return Err(format!("bore_length must be positive, got {}", self.bore_length));
        }
        if !(self.floor_height < self.bore_radius) {
            return Err("floor_height must lie below the top of the bore".into());
        }
        Ok(())
    }
}

/// Horizontal table top at world height `height`, spanning `|x| ≤ half_width`
/// and `z_min ≤ z ≤ z_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub height: f64,
    pub half_width: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Table {
    pub fn plane(&self) -> Plane {
        Plane::through(&Point3::new(0.0, self.height, 0.0), Vector3::y_axis())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: Point3<f64>,
    pub b: Point3<f64>,
    pub radius: f64,
}

impl Capsule {
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        let ab = self.b - self.a;
        let h = ((p - self.a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        (p - (self.a + ab * h)).norm() - self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub scanner: ScannerModel,
    pub table: Table,
    pub torso: Capsule,
    /// Camera frame (x right, y down, z forward) to world.
    pub camera_pose: RigidTransform,
    pub noise_sigma: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let scanner = ScannerModel::default();
        let table = Table { height: scanner.floor_height, half_width: 0.4, z_min: -1.8, z_max: 2.4 };
        let torso_y = table.height + 0.15;
        SceneConfig {
            scanner,
            table,
            torso: Capsule { a: Point3::new(0.0, torso_y, 0.35), b: Point3::new(0.0, torso_y, 1.05), radius: 0.15 },
            camera_pose: look_at(&Point3::new(0.5, 0.9, 2.4), &Point3::new(0.0, -0.1, -0.1), 0.0),
            noise_sigma: 0.0,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.scanner.validate()?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(format!("dropout_rate must lie in [0, 1], got {}", self.dropout_rate));
        }
        if !(self.torso.radius > 0.0 && self.table.half_width > 0.0 && self.table.z_max > self.table.z_min) {
            return Err("torso radius and table extent must be positive".into());
        }
        Ok(())
    }

    /// Camera to scanner-local transform: what calibration must recover.
    pub fn camera_to_scanner(&self) -> RigidTransform {
        self.scanner.pose.inverse().compose(&self.camera_pose)
    }

    /// Default room seen from a random clinician viewpoint in front of the
    /// bore and above the table.
    pub fn random(seed: u64, noise_sigma: f64, dropout_rate: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_e5ce_7e5c_e7e5);
        let eye = Point3::new(
            rng.random_range(-0.7..0.7),
            rng.random_range(0.6..1.1),
            rng.random_range(1.8..2.6),
        );
        let target = Point3::new(
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.2..0.0),
            rng.random_range(-0.3..0.1),
        );
        let roll = rng.random_range(-8.0f64..8.0).to_radians();
        SceneConfig {
            camera_pose: look_at(&eye, &target, roll),
            noise_sigma,
            dropout_rate,
            seed,
            ..SceneConfig::default()
        }
    }

    /// Reads `[scene]`; absent keys keep their defaults. Vectors are written
    /// `x, y, z`.
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let mut scene = SceneConfig::default();
        let Some(s) = cfg.section("scene") else {
            return Ok(scene);
        };
        let sc = &mut scene.scanner;
        s.read_into("bore_radius_m", &mut sc.bore_radius)?;
        s.read_into("bore_length_m", &mut sc.bore_length)?;
        s.read_into("face_outer_radius_m", &mut sc.face_outer_radius)?;
        s.read_into("floor_height_m", &mut sc.floor_height)?;
        let t = &mut scene.table;
        s.read_into("table_height_m", &mut t.height)?;
        s.read_into("table_half_width_m", &mut t.half_width)?;
        s.read_into("table_z_min_m", &mut t.z_min)?;
        s.read_into("table_z_max_m", &mut t.z_max)?;
        if let Some(a) = s.vec3("torso_a")?.map(Vector3::from) {
            scene.torso.a = Point3::from(a);
        }
        if let Some(b) = s.vec3("torso_b")?.map(Vector3::from) {
            scene.torso.b = Point3::from(b);
        }
        s.read_into("torso_radius_m", &mut scene.torso.radius)?;
        let eye = s.vec3("camera_position")?.map(Vector3::from);
        let target = s.vec3("camera_target")?.map(Vector3::from);
        let roll: f64 = s.get_or("camera_roll_deg", 0.0)?;
        match (eye, target) {
            (Some(e), Some(t)) => scene.camera_pose = look_at(&Point3::from(e), &Point3::from(t), roll.to_radians()),
            (None, None) => {}
            _ => return Err(s.invalid("camera_position", "camera_position and camera_target go together")),
        }
        s.read_into("noise_sigma_m", &mut scene.noise_sigma)?;
        s.read_into("dropout_rate", &mut scene.dropout_rate)?;
        s.read_into("seed", &mut scene.seed)?;
        scene.validate().map_err(|m| s.invalid("scene", m))?;
        Ok(scene)
    }
}

/// Camera-to-world pose looking from `eye` at `target` with world `+y` up,
/// then rolled about the viewing axis.
pub fn look_at(eye: &Point3<f64>, target: &Point3<f64>, roll: f64) -> RigidTransform {
    let forward = (target - eye).normalize();
    let right = forward.cross(&Vector3::y()).normalize();
    let down = forward.cross(&right);
    let (s, c) = roll.sin_cos();
    let r = right * c + down * s;
    let d = -right * s + down * c;
    let rot = nalgebra::Matrix3::from_columns(&[r, d, forward]);
    RigidTransform::new(rot, eye.coords).expect("look-at basis is orthonormal")
}

/// Intrinsics of the default 320×288 simulated depth camera.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::centered(320, 288, 250.0).expect("valid default intrinsics")
}

/// Reads `[camera]` (`width`, `height`, `focal_px`), defaulting to [`default_intrinsics`].
pub fn intrinsics_from_config(cfg: &Config) -> Result<CameraIntrinsics, ConfigError> {
    let d = default_intrinsics();
    let Some(s) = cfg.section("camera") else {
        return Ok(d);
    };
    let w = s.get_or("width", d.width)?;
    let h = s.get_or("height", d.height)?;
    let f = s.get_or("focal_px", d.fx)?;
    CameraIntrinsics::centered(w, h, f).map_err(|e| s.invalid("camera", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_points_camera_z_at_target() {
        let eye = Point3::new(1.0, 2.0, 3.0);
        let target = Point3::new(0.0, 0.0, 0.0);
        let pose = look_at(&eye, &target, 0.3);
        let fwd = pose.transform_vector(&Vector3::z());
        assert!((fwd - (target - eye).normalize()).norm() < 1e-12);
        assert!((pose.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_camera_down_axis_points_down() {
        let pose = look_at(&Point3::new(0.0, 1.0, 2.0), &Point3::new(0.0, 1.0, 0.0), 0.0);
        let down = pose.transform_vector(&Vector3::y());
        assert!((down - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn scene_config_section_overrides_defaults() {
        let cfg = Config::parse(
            "[scene]\nnoise_sigma_m = 0.003\ndropout_rate = 1\nseed = 42\ncamera_position = 0, 1, 2\ncamera_target = 0,0,0\n",
        )
        .unwrap();
        let s = SceneConfig::from_config(&cfg).unwrap();
        assert_eq!(s.noise_sigma, 0.003);
        assert_eq!(s.dropout_rate, 1.0);
        assert_eq!(s.seed, 42);
        assert!((s.camera_pose.translation() - Vector3::new(0.0, 1.0, 2.0)).norm() < 1e-15);
        let bad = Config::parse("[scene]\ndropout_rate = 2\n").unwrap();
        assert!(SceneConfig::from_config(&bad).is_err());
    }

    #[test]
    fn random_scenes_are_seeded() {
        assert_eq!(SceneConfig::random(5, 0.003, 0.05), SceneConfig::random(5, 0.003, 0.05));
        assert_ne!(SceneConfig::random(5, 0.003, 0.05), SceneConfig::random(6, 0.003, 0.05));
    }
}
