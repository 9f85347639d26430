use nalgebra::Point3;
use rayon::prelude::*;

use crate::geometry::{KdTree, SurfacePatch};

const DIST_BINS: usize = 4;
/// Bin edges in degrees for the two angular features.
const ANGLE_EDGES: [f64; 5] = [5.0, 10.0, 20.0, 40.0, 90.0];
const ANGLE_BINS: usize = ANGLE_EDGES.len();

pub const DESCRIPTOR_LEN: usize = DIST_BINS * ANGLE_BINS + ANGLE_BINS + 1;

pub type Descriptor = [f64; DESCRIPTOR_LEN];

fn angle_bin(cos: f64) -> usize {
    let deg = cos.clamp(0.0, 1.0).acos().to_degrees();
    ANGLE_EDGES.iter().position(|&e| deg < e).unwrap_or(ANGLE_BINS - 1)
}

/// Normal-aligned neighbourhood histogram for each keypoint.
///
/// For every neighbour `q` of keypoint `p` within `radius`, with offset
/// `v = q − p`, three quantities are binned: `|v| / radius`, the elevation of
/// `v` above the tangent plane of `p`, and the angle between the normals of
/// `p` and `q`. The first two form a joint histogram and the third a separate
/// one. A final entry holds the neighbour count. All entries are divided by
/// the count a flat, fully sampled disk of spacing `spacing` would produce,
/// so boundaries and holes show up as lower mass. Normal signs are ignored.
pub fn compute_descriptors(
    keypoints: &[usize],
    points: &[Point3<f64>],
    tree: &KdTree,
    normals: &[SurfacePatch],
    radius: f64,
    spacing: f64,
) -> Vec<Descriptor> {
    let expected = (std::f64::consts::PI * (radius / spacing).powi(2)).max(1.0);
    keypoints
        .par_iter()
        .map(|&k| {
            let p = points[k];
            let np = normals[k].normal;
            let mut d = [0.0; DESCRIPTOR_LEN];
            let mut count = 0usize;
            for j in tree.within_radius(&p, radius) {
                if j == k {
                    continue;
                }
                let v = points[j] - p;
                let len = v.norm();
                if len == 0.0 {
                    continue;
                }
                let db = ((len / radius * DIST_BINS as f64) as usize).min(DIST_BINS - 1);
                // Elevation: angle between v and the tangent plane, i.e. 90° minus angle to the normal.
                let sin_elev = (np.dot(&v) / len).abs();
                let cos_elev = (1.0 - sin_elev * sin_elev).max(0.0).sqrt();
                let eb = angle_bin(cos_elev);
                let nb = angle_bin(np.dot(&normals[j].normal).abs());
                d[db * ANGLE_BINS + eb] += 1.0;
                d[DIST_BINS * ANGLE_BINS + nb] += 1.0;
                count += 1;
            }
            d[DESCRIPTOR_LEN - 1] = count as f64;
            for x in d.iter_mut() {
                *x /= expected;
            }
            d
        })
        .collect()
}

pub(crate) fn descriptor_distance2(a: &Descriptor, b: &Descriptor) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
