use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;

use super::KdTree;

/// Local surface frame from PCA of a point's neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePatch {
    pub normal: Vector3<f64>,
    /// Surface variation `λ_min / (λ0 + λ1 + λ2)`: 0 on a plane, 1/3 for isotropic noise.
    pub variation: f64,
}

/// PCA normals over the `k` nearest neighbours (the point included). When
/// `viewpoint` is given, normals are flipped to face it; otherwise the sign
/// is arbitrary but deterministic.
pub fn estimate_normals(
    points: &[Point3<f64>],
    tree: &KdTree,
    k: usize,
    viewpoint: Option<Point3<f64>>,
) -> Vec<SurfacePatch> {
    points
        .par_iter()
        .map(|p| {
            let nbrs = tree.k_nearest(p, k.max(3));
            let mut patch = patch_from(nbrs.iter().map(|&(i, _)| tree.point(i)));
            if let Some(vp) = viewpoint {
                if patch.normal.dot(&(vp - p)) < 0.0 {
                    patch.normal = -patch.normal;
                }
            }
            patch
        })
        .collect()
}

pub fn patch_from<'a>(points: impl Iterator<Item = &'a Point3<f64>> + Clone) -> SurfacePatch {
    let (sum, n) = points.clone().fold((Vector3::zeros(), 0usize), |(s, n), p| (s + p.coords, n + 1));
    if n < 3 {
        return SurfacePatch { normal: Vector3::z(), variation: 0.0 };
    }
    let c = sum / n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let imin = eig.eigenvalues.imin();
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut normal: Vector3<f64> = eig.eigenvectors.column(imin).into_owned();
    // Canonical sign: largest-magnitude component positive.
    let big = normal.iamax();
    if normal[big] < 0.0 {
        normal = -normal;
    }
    let variation = if total > 0.0 { eig.eigenvalues[imin].max(0.0) / total } else { 0.0 };
    SurfacePatch { normal, variation }
}
