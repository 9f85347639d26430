use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Capsule, SceneConfig, ScannerModel, Table};
use crate::geometry::{sanitize_depth, CameraIntrinsics, DepthFrame, RigidTransform};

const MIN_HIT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Table = 1,
    Torso = 2,
    Bore = 3,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Background),
            1 => Some(Label::Table),
            2 => Some(Label::Torso),
            3 => Some(Label::Bore),
            _ => None,
        }
    }
}

/// Per-pixel labels plus the camera-to-scanner transform of a rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub labels: Vec<Label>,
    pub camera_to_scanner: RigidTransform,
}

impl GroundTruth {
    pub fn label_bytes(&self) -> Vec<u8> {
        self.labels.iter().map(|&l| l as u8).collect()
    }
}

/// Ray-casts the scene through every pixel.
///
/// Range noise is Gaussian along the ray and dropout is Bernoulli per pixel.
/// Each pixel draws from its own stream keyed by `(seed, pixel index)`, so
/// the output does not depend on how rows are scheduled across threads.
pub fn render_depth(scene: &SceneConfig, intrinsics: &CameraIntrinsics) -> (DepthFrame, GroundTruth) {
    let w = intrinsics.width as usize;
    let n = intrinsics.pixel_count();
    let cam = &scene.camera_pose;
    let to_scanner = scene.scanner.pose.inverse();
    let origin = Point3::from(*cam.translation());

    let samples: Vec<(f32, Label)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ray_cam = intrinsics.ray((i % w) as u32, (i / w) as u32);
            let dir_cam = Vector3::from(ray_cam);
            let scale = dir_cam.norm();
            let dir = cam.transform_vector(&(dir_cam / scale));
            let Some((range, label)) = cast(scene, &to_scanner, &origin, &dir) else {
                return (0.0, Label::Background);
            };
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
            rng.set_stream(i as u64);
            let noise: f64 = if scene.noise_sigma > 0.0 {
                scene.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let dropped = scene.dropout_rate > 0.0 && rng.random::<f64>() < scene.dropout_rate;
            let z = if dropped { 0.0 } else { ((range + noise) / scale) as f32 };
            (sanitize_depth(z), label)
        })
        .collect();

    let (depth, labels): (Vec<f32>, Vec<Label>) = samples.into_iter().unzip();
    let frame = DepthFrame::new(*intrinsics, 0, 0, depth).expect("intrinsics already validated");
    (frame, GroundTruth { labels, camera_to_scanner: scene.camera_to_scanner() })
}

/// Nearest hit along a unit-direction ray as (range, label).
fn cast(
    scene: &SceneConfig,
    to_scanner: &RigidTransform,
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
) -> Option<(f64, Label)> {
    let mut best: Option<(f64, Label)> = None;
    let mut consider = |hit: Option<f64>, label: Label| {
        if let Some(t) = hit {
            if best.is_none_or(|(b, _)| t < b) {
                best = Some((t, label));
            }
        }
    };
    consider(hit_table(&scene.table, origin, dir), Label::Table);
    consider(hit_capsule(&scene.torso, origin, dir), Label::Torso);
    let lo = to_scanner.transform_point(origin);
    let ld = to_scanner.transform_vector(dir);
    consider(hit_scanner(&scene.scanner, &lo, &ld), Label::Bore);
    best
}

fn hit_table(t: &Table, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
    if d.y.abs() < 1e-15 {
        return None;
    }
    let s = (t.height - o.y) / d.y;
    if s <= MIN_HIT {
        return None;
    }
    let p = o + d * s;
    (p.x.abs() <= t.half_width && p.z >= t.z_min && p.z <= t.z_max).then_some(s)
}

/// Capsule as swept sphere: cylinder body plus hemispherical caps.
fn hit_capsule(c: &Capsule, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let ba = c.b - c.a;
    let oa = o - c.a;
    let baba = ba.dot(&ba);
    let bard = ba.dot(d);
    let baoa = ba.dot(&oa);
    let rdoa = d.dot(&oa);
    let oaoa = oa.dot(&oa);
    let r2 = c.radius * c.radius;
    let qa = baba - bard * bard;
    let qb = baba * rdoa - baoa * bard;
    let qc = baba * oaoa - baoa * baoa - r2 * baba;
    let h = qb * qb - qa * qc;
    if h < 0.0 {
        return None;
    }
    if qa > 1e-15 {
        let t = (-qb - h.sqrt()) / qa;
        let y = baoa + t * bard;
        if y > 0.0 && y < baba && t > MIN_HIT {
            return Some(t);
        }
    }
    // Either cap, whichever sphere the ray reaches first.
    [c.a, c.b]
        .iter()
        .filter_map(|centre| {
            let oc = o - centre;
            let b = d.dot(&oc);
            let cc = oc.dot(&oc) - r2;
            let hh = b * b - cc;
            (hh >= 0.0).then(|| -b - hh.sqrt()).filter(|&t| t > MIN_HIT)
        })
        .min_by(f64::total_cmp)
}

/// Inner bore shell and face plate, in the scanner's local frame.
fn hit_scanner(m: &ScannerModel, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut keep = |t: f64| {
        if best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };

    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = 2.0 * (o.x * d.x + o.y * d.y);
        let c = o.x * o.x + o.y * o.y - m.bore_radius * m.bore_radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                if t <= MIN_HIT {
                    continue;
                }
                let p = o + d * t;
                // Only the inside of the shell is exposed.
                let outward = p.x * d.x + p.y * d.y > 0.0;
                if outward && p.z <= 0.0 && p.z >= -m.bore_length && p.y >= m.floor_height {
                    keep(t);
                }
            }
        }
    }

    if d.z < 0.0 && o.z > 0.0 {
        let t = -o.z / d.z;
        let p = o + d * t;
        let rho = (p.x * p.x + p.y * p.y).sqrt();
        if t > MIN_HIT && rho >= m.bore_radius && rho <= m.face_outer_radius && p.y >= m.floor_height {
            keep(t);
        }
    }
    best
}

/// Distance from `p` (scanner local frame) to the exposed scanner surface.
pub fn scanner_surface_distance(m: &ScannerModel, p: &Point3<f64>) -> f64 {
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let shell = if p.z <= 0.0 && p.z >= -m.bore_length {
        (rho - m.bore_radius).abs()
    } else {
        f64::INFINITY
    };
    let face = if rho >= m.bore_radius && rho <= m.face_outer_radius {
        p.z.abs()
    } else {
        f64::INFINITY
    };
    shell.min(face)
}
