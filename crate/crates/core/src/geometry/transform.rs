use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, PointCloud};

/// Tolerance for the orthonormality and determinant checks.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Element of SE(3): `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// JSON shape: row-major rotation rows plus translation.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = GeometryError;

    fn try_from(r: TransformRepr) -> Result<Self, Self::Error> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        RigidTransform::new(m, Vector3::from(r.translation))
    }
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let m = &t.rotation;
        TransformRepr {
            rotation: [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]]),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Checks `RᵀR = I` and `det R = +1` within [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !translation.iter().all(|c| c.is_finite()) || !rotation.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidParameter("transform has non-finite entries".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidParameter(format!(
                "rotation is not proper orthonormal (|RᵀR - I| = {ortho:.3e}, det = {det})"
            )));
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation: rotation.into_inner(), translation }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self::from_rotation(rot, translation)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation }
    }

    /// Row-major rotation entries followed by the translation.
    pub fn from_row_major(values: &[f64; 12]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::from_row_slice(&values[..9]);
        Self::new(rotation, Vector3::new(values[9], values[10], values[11]))
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t.x, t.y, t.z,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::from_finite(cloud.iter().map(|p| self.transform_point(p)).collect())
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Geodesic angle (radians) of the relative rotation to `other`.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Largest absolute entry-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let a = self.to_row_major();
        let b = other.to_row_major();
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

pub fn apply(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    t.apply(cloud)
}

/// Applies `b`, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Least-squares SE(3) fit minimizing `Σ ‖R·src[i] + t − dst[j]‖²` over the
/// index pairs `(i, j)`.
pub fn estimate_rigid_from_correspondences(
    src: &PointCloud,
    dst: &PointCloud,
    pairs: &[(usize, usize)],
) -> Result<RigidTransform, GeometryError> {
    let s: Vec<Point3<f64>> = pairs.iter().map(|&(i, _)| src.points()[i]).collect();
    let d: Vec<Point3<f64>> = pairs.iter().map(|&(_, j)| dst.points()[j]).collect();
    fit_rigid(&s, &d)
}

/// Kabsch fit on matched point lists with a determinant-sign correction that
/// keeps the result a proper rotation.
pub fn fit_rigid(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Result<RigidTransform, GeometryError> {
    assert_eq!(src.len(), dst.len(), "matched point lists differ in length");
    if src.len() < 3 {
        return Err(GeometryError::DegenerateGeometry(format!(
            "rigid fit needs at least 3 correspondences, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;

    let mut h = Matrix3::zeros();
    let mut scatter_s = Matrix3::zeros();
    let mut scatter_d = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        let a = p.coords - cs;
        let b = q.coords - cd;
        h += a * b.transpose();
        scatter_s += a * a.transpose();
        scatter_d += b * b.transpose();
    }
    if is_collinear(&scatter_s) || is_collinear(&scatter_d) {
        return Err(GeometryError::DegenerateGeometry("correspondences are collinear or coincident".into()));
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v = svd.v_t.expect("svd requested v_t").transpose();
    let mut correction = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        let weakest = svd.singular_values.imin();
        correction[(weakest, weakest)] = -1.0;
    }
    let rotation = v * correction * u.transpose();
    let translation = cd - rotation * cs;
    Ok(RigidTransform { rotation, translation })
}

fn is_collinear(scatter: &Matrix3<f64>) -> bool {
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[0] <= f64::MIN_POSITIVE || ev[1] <= 1e-12 * ev[0]
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    #[test]
    fn identity_leaves_cloud_unchanged() {
        let c = cloud(&[[1.0, 2.0, 3.0], [-0.5, 0.0, 4.0]]);
        assert_eq!(RigidTransform::identity().apply(&c), c);
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let p = t.transform_point(&Point3::new(1.0, 0.0, 0.0));
        assert!((p - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = RigidTransform::from_axis_angle(Vector3::new(1.0, -2.0, 0.5), 2.3, Vector3::new(0.4, -1.0, 3.0));
        assert!(t.compose(&t.inverse()).max_abs_diff(&RigidTransform::identity()) < 1e-9);
        assert!(t.inverse().compose(&t).max_abs_diff(&RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let a = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let b = RigidTransform::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let p = compose(&a, &b).transform_point(&Point3::new(1.0, 0.0, 0.0));
        assert!((p - Point3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn new_rejects_reflection_and_shear() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
        m[(2, 2)] = 1.0;
        m[(0, 1)] = 1e-6;
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn fit_on_identical_clouds_is_identity() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let pairs: Vec<_> = (0..4).map(|i| (i, i)).collect();
        let t = estimate_rigid_from_correspondences(&c, &c, &pairs).unwrap();
        assert!(t.max_abs_diff(&RigidTransform::identity()) < 1e-12);
    }

    #[test]
    fn fit_recovers_known_transform() {
        let c = cloud(&[[0.1, 0.2, 0.3], [1.0, -0.4, 0.2], [-0.3, 1.1, 0.7], [0.5, 0.5, -1.0], [0.9, 0.1, 0.4]]);
        let truth = RigidTransform::from_axis_angle(Vector3::new(0.3, 0.9, -0.2), 2.9, Vector3::new(-1.0, 0.25, 2.0));
        let moved = truth.apply(&c);
        let pairs: Vec<_> = (0..c.len()).map(|i| (i, i)).collect();
        let t = estimate_rigid_from_correspondences(&c, &moved, &pairs).unwrap();
        assert!(t.max_abs_diff(&truth) < 1e-9);
    }

    #[test]
    fn fit_handles_planar_configuration() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        let truth = RigidTransform::from_axis_angle(Vector3::x(), 3.0, Vector3::new(0.0, 1.0, 0.0));
        let pairs: Vec<_> = (0..4).map(|i| (i, i)).collect();
        let t = estimate_rigid_from_correspondences(&c, &truth.apply(&c), &pairs).unwrap();
        assert!(t.max_abs_diff(&truth) < 1e-9);
        assert!((t.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_too_few_pairs() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let err = estimate_rigid_from_correspondences(&c, &c, &[(0, 0), (1, 1)]).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateGeometry(_)));
    }

    #[test]
    fn fit_rejects_collinear_points() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let pairs: Vec<_> = (0..4).map(|i| (i, i)).collect();
        assert!(matches!(
            estimate_rigid_from_correspondences(&c, &c, &pairs),
            Err(GeometryError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn row_major_round_trip() {
        let t = RigidTransform::from_axis_angle(Vector3::new(1.0, 1.0, 0.0), 0.7, Vector3::new(1.0, 2.0, 3.0));
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        assert_eq!(back, t);
    }
}
