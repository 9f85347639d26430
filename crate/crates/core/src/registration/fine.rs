use nalgebra::{DMatrix, DVector, Point3, Rotation3, Vector3};
use rayon::prelude::*;

use crate::geometry::{estimate_normals, KdTree, PointCloud, RigidTransform};

const NORMAL_K: usize = 12;
/// Residuals above this multiple of the median are dropped from a step, once
/// the halving cut-off has come down that far.
const TRIM: f64 = 3.0;

/// Point-to-plane refinement of `init` against a dense `target`.
///
/// Each Gauss-Newton step linearises `n · (R q + t − p)` over nearest-point
/// pairs within `max_dist`, where `n` is the PCA normal of the target at `p`.
/// Rotation about `locked_axis` (target frame) is excluded from the update,
/// for a direction the data does not constrain. Pairs are trimmed at a
/// cut-off that starts at `max_dist` and halves every step, but never drops
/// below three times the median residual. Stops after `iterations` steps or
/// once a step moves less than 1e-10.
pub fn refine_point_to_plane(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    max_dist: f64,
    iterations: usize,
    locked_axis: Option<Vector3<f64>>,
) -> RigidTransform {
    if source.is_empty() || target.len() < 3 {
        return *init;
    }
    let tree = KdTree::build(target.points());
    let normals = estimate_normals(target.points(), &tree, NORMAL_K, None);
    // Columns map reduced parameters to (ω, t).
    let basis = match locked_axis {
        Some(a) if a.norm() > 0.0 => {
            let a = a.normalize();
            let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let u = a.cross(&helper).normalize();
            let v = a.cross(&u);
            let mut b = DMatrix::zeros(6, 5);
            for i in 0..3 {
                b[(i, 0)] = u[i];
                b[(i, 1)] = v[i];
                b[(3 + i, 2 + i)] = 1.0;
            }
            b
        }
        _ => DMatrix::identity(6, 6),
    };
    let dims = basis.ncols();
    let max2 = max_dist * max_dist;
    let mut t = *init;
    for it in 0..iterations {
        let pairs: Vec<Option<(Point3<f64>, Vector3<f64>, f64)>> = source
            .points()
            .par_iter()
            .map(|p| {
                let q = t.transform_point(p);
                tree.nearest(&q).filter(|&(_, d2)| d2 <= max2).map(|(j, _)| {
                    let n = normals[j].normal;
                    (q, n, n.dot(&(q - tree.point(j))))
                })
            })
            .collect();
        let pairs: Vec<_> = pairs.into_iter().flatten().collect();
        if pairs.len() < dims {
            break;
        }
        let mut abs: Vec<f64> = pairs.iter().map(|x| x.2.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let cut = (max_dist * 0.75f64.powi(it as i32)).max(TRIM * abs[abs.len() / 2]) + 1e-12;

        let mut h = DMatrix::<f64>::zeros(dims, dims);
        let mut g = DVector::<f64>::zeros(dims);
        let mut used = 0usize;
        for (q, n, r) in &pairs {
            if r.abs() > cut {
                continue;
            }
            let c = q.coords.cross(n);
            let full = DVector::from_column_slice(&[c.x, c.y, c.z, n.x, n.y, n.z]);
            let j = basis.tr_mul(&full);
            h += &j * j.transpose();
            g += &j * *r;
            used += 1;
        }
        if used < dims {
            break;
        }
        let Some(chol) = h.cholesky() else {
            break;
        };
        let x = &basis * chol.solve(&(-g));
        let omega = Vector3::new(x[0], x[1], x[2]);
        let step = RigidTransform::from_rotation(Rotation3::new(omega), Vector3::new(x[3], x[4], x[5]));
        t = step.compose(&t);
        if x.norm() < 1e-10 && cut <= TRIM * abs[abs.len() / 2] + 1e-12 {
            break;
        }
    }
    t
}
