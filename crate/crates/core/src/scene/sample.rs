use std::f64::consts::{PI, TAU};

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Capsule, ScannerModel};
use crate::geometry::PointCloud;

/// Area of the part of a radius-`r` disk with `y ≥ h`.
fn disk_area_above(r: f64, h: f64) -> f64 {
    if h <= -r {
        PI * r * r
    } else if h >= r {
        0.0
    } else {
        r * r * (h / r).acos() - h * (r * r - h * h).sqrt()
    }
}

/// Angular span `[start, start + span]` of the shell above the floor, with
/// angles measured from `+x` toward `+y`.
fn shell_arc(m: &ScannerModel) -> (f64, f64) {
    let s = (m.floor_height / m.bore_radius).clamp(-1.0, 1.0);
    if s <= -1.0 {
        return (0.0, TAU);
    }
    let start = s.asin();
    (start, PI - 2.0 * start)
}

/// Uniform-by-area samples of the exposed scanner surface (inner shell and
/// face plate above the floor), in the scanner's local frame.
pub fn sample_model_cloud(model: &ScannerModel, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (start, span) = shell_arc(model);
    let r = model.bore_radius;
    let ro = model.face_outer_radius;
    let shell_area = r * span * model.bore_length;
    let face_area = disk_area_above(ro, model.floor_height) - disk_area_above(r, model.floor_height);
    let p_shell = shell_area / (shell_area + face_area);

    let points = (0..n)
        .map(|_| {
            if rng.random::<f64>() < p_shell {
                let theta = start + span * rng.random::<f64>();
                let z = -model.bore_length * rng.random::<f64>();
                Point3::new(r * theta.cos(), r * theta.sin(), z)
            } else {
                loop {
                    let rho = (r * r + (ro * ro - r * r) * rng.random::<f64>()).sqrt();
                    let theta = TAU * rng.random::<f64>();
                    let p = Point3::new(rho * theta.cos(), rho * theta.sin(), 0.0);
                    if p.y >= model.floor_height {
                        break p;
                    }
                }
            }
        })
        .collect();
    PointCloud::from_finite(points)
}

/// Uniform-by-area samples of a capsule surface (world frame).
pub fn sample_capsule_surface(c: &Capsule, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = c.b - c.a;
    let len = axis.norm();
    let dir = axis / len;
    let helper = if dir.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = dir.cross(&helper).normalize();
    let e2 = dir.cross(&e1);
    let body = TAU * c.radius * len;
    let caps = 4.0 * PI * c.radius * c.radius;
    let points = (0..n)
        .map(|_| {
            if rng.random::<f64>() * (body + caps) < body {
                let t = rng.random::<f64>() * len;
                let phi = TAU * rng.random::<f64>();
                c.a + dir * t + (e1 * phi.cos() + e2 * phi.sin()) * c.radius
            } else {
                // Uniform direction on the sphere; the hemisphere picks the cap.
                let zc = 2.0 * rng.random::<f64>() - 1.0;
                let phi = TAU * rng.random::<f64>();
                let s = (1.0 - zc * zc).sqrt();
                let v = e1 * (s * phi.cos()) + e2 * (s * phi.sin()) + dir * zc;
                let centre = if zc >= 0.0 { c.b } else { c.a };
                centre + v * c.radius
            }
        })
        .collect();
    PointCloud::from_finite(points)
}
