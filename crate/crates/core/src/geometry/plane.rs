use nalgebra::{Point3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// The set `{p : normal · p = offset}` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    normal: Vector3<f64>,
    offset: f64,
}

impl Plane {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self, GeometryError> {
        let norm = normal.norm();
        if !(norm.is_finite() && norm > 0.0 && offset.is_finite()) {
            return Err(GeometryError::InvalidParameter(format!("bad plane normal {normal:?}")));
        }
        Ok(Plane { normal: normal / norm, offset: offset / norm })
    }

    pub fn from_unit(normal: Unit<Vector3<f64>>, offset: f64) -> Self {
        Plane { normal: normal.into_inner(), offset }
    }

    /// Plane through `point` with the given normal.
    pub fn through(point: &Point3<f64>, normal: Unit<Vector3<f64>>) -> Self {
        Plane { normal: normal.into_inner(), offset: normal.dot(&point.coords) }
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    #[inline]
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.normal.dot(&p.coords) - self.offset
    }

    #[inline]
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        self.signed_distance(p).abs()
    }

    pub fn flipped(&self) -> Plane {
        Plane { normal: -self.normal, offset: -self.offset }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_on_construction() {
        let p = Plane::new(Vector3::new(0.0, 0.0, 2.0), 4.0).unwrap();
        assert_eq!(p.normal(), &Vector3::z());
        assert_eq!(p.offset(), 2.0);
        assert_eq!(p.signed_distance(&Point3::new(5.0, 1.0, 3.0)), 1.0);
        assert!(Plane::new(Vector3::zeros(), 1.0).is_err());
    }
}
