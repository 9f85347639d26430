use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_plane, ransac_plane};
use crate::geometry::{estimate_normals, KdTree, PointCloud, SurfacePatch};

const HYPOTHESES: usize = 512;
const NORMAL_K: usize = 16;
const REFINE_PASSES: usize = 5;
const MIN_POINTS: usize = 10;
const FACE_ITERATIONS: usize = 200;
/// A plane holding this share of a cluster is taken as a face-plate candidate.
const FACE_MIN_FRACTION: f64 = 0.25;

/// Known-radius fit of the bore shape (cylindrical shell plus the annular
/// face plate) to a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoreFit {
    pub axis: Vector3<f64>,
    /// A point on the axis.
    pub center: Point3<f64>,
    /// `axis · p` on the face plate, when the cluster shows one.
    pub face_offset: Option<f64>,
    /// Median over the cluster of the distance to the fitted shape.
    pub residual: f64,
    /// Fraction of points within `2 × tolerance` of the fitted shape.
    pub inlier_fraction: f64,
}

impl BoreFit {
    /// Distance from `p` to the fitted shape.
    pub fn distance(&self, p: &Point3<f64>, bore_radius: f64, face_outer_radius: f64) -> f64 {
        let shape = Shape { axis: self.axis, center: self.center, face_offset: self.face_offset };
        residual(&shape, p, bore_radius, face_outer_radius)
    }
}

struct Shape {
    axis: Vector3<f64>,
    center: Point3<f64>,
    face_offset: Option<f64>,
}

fn radial(shape: &Shape, p: &Point3<f64>) -> (f64, f64) {
    let d = p - shape.center;
    let along = shape.axis.dot(&d);
    ((d - shape.axis * along).norm(), shape.axis.dot(&p.coords))
}

fn residual(shape: &Shape, p: &Point3<f64>, r: f64, ro: f64) -> f64 {
    let (rho, h) = radial(shape, p);
    let shell = (rho - r).abs();
    match shape.face_offset {
        Some(f) => shell.min((h - f).abs() + (r - rho).max(rho - ro).max(0.0)),
        None => shell,
    }
}

fn face_offset(
    axis: &Vector3<f64>,
    center: &Point3<f64>,
    pts: &[Point3<f64>],
    normals: &[SurfacePatch],
    r: f64,
    ro: f64,
    tol: f64,
) -> Option<f64> {
    let probe = Shape { axis: *axis, center: *center, face_offset: None };
    let mut hs: Vec<f64> = pts
        .iter()
        .zip(normals)
        .filter(|(p, n)| {
            let (rho, _) = radial(&probe, p);
            n.normal.dot(axis).abs() > 0.9 && rho > r - tol && rho < ro + tol
        })
        .map(|(p, _)| axis.dot(&p.coords))
        .collect();
    if hs.len() < MIN_POINTS {
        return None;
    }
    hs.sort_by(f64::total_cmp);
    Some(hs[hs.len() / 2])
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fits the bore shape by sampling axis hypotheses and keeping the one with
/// the most points near the shape.
///
/// Two kinds of hypotheses are drawn. When the cluster contains a dominant
/// plane (the face plate), its normal is taken as the axis and each sampled
/// shell-like point, stepped one radius along its normal, proposes a centre.
/// Independently, pairs of oriented points propose an axis (the cross product
/// of their normals) and a centre. The winner is refined from its inliers.
/// Returns `None` when the cluster is too small or nothing gives a usable axis.
pub fn fit_bore(cloud: &PointCloud, bore_radius: f64, face_outer_radius: f64, tol: f64, seed: u64) -> Option<BoreFit> {
    let pts = cloud.points();
    if pts.len() < MIN_POINTS {
        return None;
    }
    let tree = KdTree::build(pts);
    let normals = estimate_normals(pts, &tree, NORMAL_K, None);
    let (r, ro) = (bore_radius, face_outer_radius);
    let band = 2.0 * tol;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let face_axis = ransac_plane(cloud, tol, FACE_ITERATIONS, rng.random())
        .ok()
        .filter(|(_, inl)| inl.len() as f64 >= FACE_MIN_FRACTION * pts.len() as f64)
        .map(|(plane, _)| *plane.normal());
    let singles: Vec<usize> = match face_axis {
        Some(a) => {
            let cand: Vec<usize> = (0..pts.len()).filter(|&i| normals[i].normal.dot(&a).abs() < 0.3).collect();
            if cand.is_empty() {
                Vec::new()
            } else {
                (0..HYPOTHESES).map(|_| cand[rng.random_range(0..cand.len())]).collect()
            }
        }
        None => Vec::new(),
    };
    let pairs: Vec<(usize, usize)> =
        (0..HYPOTHESES).map(|_| (rng.random_range(0..pts.len()), rng.random_range(0..pts.len()))).collect();

    let score = |shape: &Shape| pts.iter().filter(|p| residual(shape, p, r, ro) < band).count();
    let with_face = |axis: Vector3<f64>, center: Point3<f64>| {
        let face = face_offset(&axis, &center, pts, &normals, r, ro, tol);
        Shape { axis, center, face_offset: face }
    };

    let from_singles = singles.par_iter().enumerate().flat_map_iter(|(h, &i)| {
        let axis = face_axis.expect("singles imply a face axis");
        let n = normals[i].normal;
        let radial = (n - axis * axis.dot(&n)).normalize();
        [1.0, -1.0].into_iter().enumerate().map(move |(k, s)| (h, k, axis, pts[i] - radial * (s * r)))
    });
    let from_pairs = pairs.par_iter().enumerate().flat_map_iter(|(h, &(i, j))| {
        let (ni, nj) = (normals[i].normal, normals[j].normal);
        let cross = ni.cross(&nj);
        let mut out = Vec::new();
        if cross.norm() >= 0.4 {
            let axis = cross.normalize();
            for (k, s) in [1.0, -1.0].into_iter().enumerate() {
                let ci = pts[i] - ni * (s * r);
                let cj = pts[j] - nj * (s * r);
                let gap = (ci - cj) - axis * axis.dot(&(ci - cj));
                if gap.norm() <= 0.25 * r {
                    out.push((HYPOTHESES + h, k, axis, Point3::from((ci.coords + cj.coords) * 0.5)));
                }
            }
        }
        out
    });
    let best = from_singles
        .chain(from_pairs)
        .map(|(h, k, axis, center)| {
            let shape = with_face(axis, center);
            (score(&shape), 2 * h + k, shape)
        })
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))?;

    let mut shape = best.2;
    for _ in 0..REFINE_PASSES {
        shape = refine(shape, pts, &normals, r, ro, tol, band);
    }
    let res: Vec<f64> = pts.iter().map(|p| residual(&shape, p, r, ro)).collect();
    let inliers = res.iter().filter(|&&d| d < band).count();
    Some(BoreFit {
        axis: shape.axis,
        center: shape.center,
        face_offset: shape.face_offset,
        residual: median(res),
        inlier_fraction: inliers as f64 / pts.len() as f64,
    })
}

/// One refinement pass. The axis comes from the face-plate inliers when
/// there are enough of them (their least-squares normal), otherwise from the
/// direction most orthogonal to the shell inliers' normals. The centre is
/// the mean of the shell inliers stepped one radius toward the axis.
fn refine(shape: Shape, pts: &[Point3<f64>], normals: &[SurfacePatch], r: f64, ro: f64, tol: f64, band: f64) -> Shape {
    let mut shell = Vec::new();
    let mut face = Vec::new();
    for i in 0..pts.len() {
        let (rho, h) = radial(&shape, &pts[i]);
        let along = normals[i].normal.dot(&shape.axis).abs();
        if (rho - r).abs() < band && along < 0.5 {
            shell.push(i);
        } else if let Some(f) = shape.face_offset {
            if (h - f).abs() < band && rho > r - band && rho < ro + band && along > 0.8 {
                face.push(i);
            }
        }
    }
    let mut axis = if face.len() >= MIN_POINTS {
        fit_plane(face.iter().map(|&i| &pts[i])).map(|p| *p.normal()).unwrap_or(shape.axis)
    } else if shell.len() >= MIN_POINTS {
        let mut scatter = Matrix3::zeros();
        for &i in &shell {
            let n = normals[i].normal;
            scatter += n * n.transpose();
        }
        let eig = scatter.symmetric_eigen();
        eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned()
    } else {
        return shape;
    };
    if axis.dot(&shape.axis) < 0.0 {
        axis = -axis;
    }
    let mut center = shape.center;
    if shell.len() >= MIN_POINTS {
        let mut sum = Vector3::zeros();
        for &i in &shell {
            let d = pts[i] - shape.center;
            let radial_dir = (d - axis * axis.dot(&d)).normalize();
            sum += (pts[i] - radial_dir * r).coords;
        }
        center = Point3::from(sum / shell.len() as f64);
        // Only the offset across the axis is meaningful; keep the axial position.
        center += axis * axis.dot(&(shape.center - center));
    }
    let face_off = face_offset(&axis, &center, pts, normals, r, ro, tol);
    let refined = Shape { axis, center, face_offset: face_off };
    let before = pts.iter().filter(|p| residual(&shape, p, r, ro) < band).count();
    let after = pts.iter().filter(|p| residual(&refined, p, r, ro) < band).count();
    if after >= before {
        refined
    } else {
        shape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use crate::scene::{sample_capsule_surface, sample_model_cloud, Capsule, ScannerModel};

    #[test]
    fn bore_fits_better_than_torso() {
        let m = ScannerModel::default();
        let pose = RigidTransform::from_axis_angle(Vector3::new(0.3, 1.0, 0.2), 0.7, Vector3::new(0.1, -0.2, 2.0));
        let bore = pose.apply(&sample_model_cloud(&m, 4000, 1));
        let torso = Capsule { a: Point3::new(0.0, 0.0, 1.0), b: Point3::new(0.0, 0.0, 1.7), radius: 0.15 };
        let torso = sample_capsule_surface(&torso, 3000, 2);
        let fb = fit_bore(&bore, m.bore_radius, m.face_outer_radius, 0.01, 0).unwrap();
        assert!(fb.residual < 0.005, "bore residual {}", fb.residual);
        let axis_true = pose.transform_vector(&Vector3::z());
        assert!(fb.axis.dot(&axis_true).abs() > 0.99);
        let ft = fit_bore(&torso, m.bore_radius, m.face_outer_radius, 0.01, 0);
        assert!(ft.map_or(true, |f| f.residual > 3.0 * fb.residual));
    }
}
