use std::collections::BTreeMap;

use nalgebra::{Point3, Vector3};

use super::{DepthFrame, GeometryError};

/// Unordered set of 3D points in meters. Every coordinate is finite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self, GeometryError> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::InvalidParameter(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud { points })
    }

    /// Caller guarantees finiteness (points derived from finite inputs).
    pub(crate) fn from_finite(points: Vec<Point3<f64>>) -> Self {
        debug_assert!(points.iter().all(|p| p.coords.iter().all(|c| c.is_finite())));
        PointCloud { points }
    }

    pub fn empty() -> Self {
        PointCloud { points: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3<f64>> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Point3<f64>> {
        self.points
    }

    /// Sub-cloud made of the points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud { points: indices.iter().map(|&i| self.points[i]).collect() }
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point3<f64>;
    type IntoIter = std::slice::Iter<'a, Point3<f64>>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// Pinhole back-projection of every valid, unmasked pixel:
/// `x = (u - cx) z / fx`, `y = (v - cy) z / fy`.
///
/// A `true` mask entry excludes the pixel. The mask must match the frame size.
pub fn backproject(frame: &DepthFrame, mask: Option<&[bool]>) -> PointCloud {
    backproject_indexed(frame, mask).0
}

/// Like [`backproject`], also returning the source pixel index of each point.
pub fn backproject_indexed(frame: &DepthFrame, mask: Option<&[bool]>) -> (PointCloud, Vec<usize>) {
    let k = &frame.intrinsics;
    let w = frame.width();
    if let Some(m) = mask {
        assert_eq!(m.len(), frame.depth().len(), "mask size does not match frame");
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for (i, &d) in frame.depth().iter().enumerate() {
        if d <= 0.0 || mask.is_some_and(|m| m[i]) {
            continue;
        }
        let z = d as f64;
        let (u, v) = ((i % w) as f64, (i / w) as f64);
        points.push(Point3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z));
        pixels.push(i);
    }
    (PointCloud::from_finite(points), pixels)
}

/// Integer voxel coordinate of `p`, rounding toward negative infinity.
#[inline]
pub fn voxel_key(p: &Point3<f64>, voxel: f64) -> [i64; 3] {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

/// Replaces the points of each occupied voxel by their centroid. Output is
/// ordered by voxel key, so it does not depend on input order.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud, GeometryError> {
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(GeometryError::InvalidParameter(format!("voxel size must be positive, got {voxel}")));
    }
    let mut cells: BTreeMap<[i64; 3], (Vector3<f64>, usize)> = BTreeMap::new();
    for p in cloud {
        let cell = cells.entry(voxel_key(p, voxel)).or_insert((Vector3::zeros(), 0));
        cell.0 += p.coords;
        cell.1 += 1;
    }
    let points = cells
        .into_values()
        .map(|(sum, n)| Point3::from(sum / n as f64))
        .collect();
    Ok(PointCloud::from_finite(points))
}

/// One representative input index per occupied voxel: the member closest to
/// the voxel centroid, ties going to the lower index. Ordered by voxel key.
pub fn voxel_subsample_indices(cloud: &PointCloud, voxel: f64) -> Result<Vec<usize>, GeometryError> {
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(GeometryError::InvalidParameter(format!("voxel size must be positive, got {voxel}")));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.iter().enumerate() {
        cells.entry(voxel_key(p, voxel)).or_default().push(i);
    }
    let pts = cloud.points();
    Ok(cells
        .into_values()
        .map(|members| {
            let c = members.iter().fold(Vector3::zeros(), |s, &i| s + pts[i].coords) / members.len() as f64;
            *members
                .iter()
                .min_by(|&&a, &&b| (pts[a].coords - c).norm_squared().total_cmp(&(pts[b].coords - c).norm_squared()))
                .expect("occupied voxel has members")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;

    #[test]
    fn subsample_picks_one_member_per_voxel() {
        let c = PointCloud::new(vec![
            Point3::new(0.001, 0.0, 0.0),
            Point3::new(0.004, 0.0, 0.0),
            Point3::new(0.009, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
        ])
        .unwrap();
        assert_eq!(voxel_subsample_indices(&c, 0.01).unwrap(), vec![1, 3]);
        assert!(voxel_subsample_indices(&c, 0.0).is_err());
    }

    #[test]
    fn rejects_non_finite_points() {
        assert!(PointCloud::new(vec![Point3::new(0.0, f64::NAN, 0.0)]).is_err());
        assert!(PointCloud::new(vec![Point3::new(0.0, 1.0, f64::INFINITY)]).is_err());
    }

    #[test]
    fn principal_ray_backprojects_onto_axis() {
        let k = CameraIntrinsics::new(101, 101, 100.0, 100.0, 50.0, 50.0).unwrap();
        let mut d = vec![0.0; 101 * 101];
        d[50 * 101 + 50] = 1.5;
        let cloud = backproject(&DepthFrame::new(k, 0, 0, d).unwrap(), None);
        assert_eq!(cloud.points(), &[Point3::new(0.0, 0.0, 1.5)]);
    }

    #[test]
    fn off_axis_pixel_follows_pinhole_model() {
        let k = CameraIntrinsics::new(200, 100, 100.0, 100.0, 50.0, 50.0).unwrap();
        let mut d = vec![0.0; 200 * 100];
        d[50 * 200 + 150] = 2.0;
        let cloud = backproject(&DepthFrame::new(k, 0, 0, d).unwrap(), None);
        assert_eq!(cloud.points(), &[Point3::new(2.0, 0.0, 2.0)]);
    }

    #[test]
    fn all_invalid_frame_gives_empty_cloud() {
        let k = CameraIntrinsics::centered(4, 4, 10.0).unwrap();
        assert!(backproject(&DepthFrame::filled(k, 0.0).unwrap(), None).is_empty());
    }

    #[test]
    fn mask_excludes_pixels() {
        let k = CameraIntrinsics::centered(2, 2, 10.0).unwrap();
        let f = DepthFrame::filled(k, 1.0).unwrap();
        let (cloud, px) = backproject_indexed(&f, Some(&[false, true, true, false]));
        assert_eq!(cloud.len(), 2);
        assert_eq!(px, vec![0, 3]);
    }

    #[test]
    fn voxel_single_point_is_unchanged() {
        let c = PointCloud::new(vec![Point3::new(0.3, -0.2, 1.7)]).unwrap();
        assert_eq!(voxel_downsample(&c, 0.01).unwrap(), c);
    }

    #[test]
    fn voxel_merges_points_sharing_a_cell() {
        let c = PointCloud::new(vec![Point3::origin(), Point3::new(0.001, 0.0, 0.0)]).unwrap();
        let out = voxel_downsample(&c, 0.01).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.points()[0] - Point3::new(0.0005, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn voxel_keeps_points_in_distinct_cells() {
        let c = PointCloud::new(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(voxel_downsample(&c, 0.01).unwrap(), c);
    }

    #[test]
    fn voxel_floor_rounds_negative_coordinates_down() {
        assert_eq!(voxel_key(&Point3::new(-0.001, 0.0, 0.0099), 0.01), [-1, 0, 0]);
        let c = PointCloud::new(vec![Point3::new(-0.001, 0.0, 0.0), Point3::new(0.001, 0.0, 0.0)]).unwrap();
        assert_eq!(voxel_downsample(&c, 0.01).unwrap().len(), 2);
    }

    #[test]
    fn voxel_rejects_non_positive_size() {
        let c = PointCloud::empty();
        assert!(voxel_downsample(&c, 0.0).is_err());
        assert!(voxel_downsample(&c, -1.0).is_err());
    }
}
