//! Table-plane removal and patient/bore separation.

mod bore;
mod cluster;

use nalgebra::{Point3, Unit, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ConfigError};
use crate::geometry::{patch_from, Plane, PointCloud};

pub use bore::{fit_bore, BoreFit};
pub use cluster::{euclidean_cluster_indices, euclidean_clusters};

/// Clusters smaller than this share of the largest one are not bore candidates.
const BORE_MIN_SHARE: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum SegmentationError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("no plane found: best model has {0} inliers")]
    NoPlaneFound(usize),
    #[error("segmentation failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub ransac_iterations: usize,
    pub ransac_threshold: f64,
    pub cluster_radius: f64,
    pub cluster_min_points: usize,
    /// Known bore geometry used to tell the bore cluster from the patient.
    pub bore_radius: f64,
    pub face_outer_radius: f64,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            ransac_iterations: 500,
            ransac_threshold: 0.01,
            cluster_radius: 0.03,
            cluster_min_points: 50,
            bore_radius: 0.35,
            face_outer_radius: 0.6,
            seed: 0,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SegmentationError> {
        if self.ransac_iterations == 0 {
            return Err(SegmentationError::InvalidParameter("ransac_iterations must be at least 1".into()));
        }
        for (name, v) in [
            ("ransac_threshold_m", self.ransac_threshold),
            ("cluster_radius_m", self.cluster_radius),
            ("bore_radius_m", self.bore_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SegmentationError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.face_outer_radius > self.bore_radius) {
            return Err(SegmentationError::InvalidParameter("face_outer_radius_m must exceed bore_radius_m".into()));
        }
        Ok(())
    }

    /// Reads `[segmentation]`, keeping defaults for absent keys.
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        let mut c = SegmentationConfig::default();
        if let Some(s) = cfg.section("segmentation") {
            s.read_into("ransac_iterations", &mut c.ransac_iterations)?;
            s.read_into("ransac_threshold_m", &mut c.ransac_threshold)?;
            s.read_into("cluster_radius_m", &mut c.cluster_radius)?;
            s.read_into("cluster_min_points", &mut c.cluster_min_points)?;
            s.read_into("bore_radius_m", &mut c.bore_radius)?;
            s.read_into("face_outer_radius_m", &mut c.face_outer_radius)?;
            s.read_into("seed", &mut c.seed)?;
            c.validate().map_err(|e| s.invalid("segmentation", e.to_string()))?;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    pub table_plane: Plane,
    /// Indices into the input cloud.
    pub table_inliers: Vec<usize>,
    pub patient: PointCloud,
    pub bore: PointCloud,
    pub patient_indices: Vec<usize>,
    pub bore_indices: Vec<usize>,
    pub bore_fit: BoreFit,
}

/// Seeded RANSAC plane fit.
///
/// Each iteration samples three distinct points; the winner has the most
/// inliers, ties going to the lower mean inlier distance and then the earlier
/// iteration. The winner is refit by least squares over its inliers and the
/// returned inlier set is measured against the refit plane. The normal points
/// toward the origin (the sensor) when the plane does not pass through it.
pub fn ransac_plane(
    cloud: &PointCloud,
    dist_threshold: f64,
    max_iterations: usize,
    seed: u64,
) -> Result<(Plane, Vec<usize>), SegmentationError> {
    let pts = cloud.points();
    if pts.len() < 3 {
        return Err(SegmentationError::DegenerateInput(format!("plane fit needs 3 points, got {}", pts.len())));
    }
    if !(dist_threshold > 0.0) || max_iterations == 0 {
        return Err(SegmentationError::InvalidParameter(
            "dist_threshold must be positive and max_iterations at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pts.len();
    let triplets: Vec<[usize; 3]> = (0..max_iterations)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let mut c = rng.random_range(0..n - 2);
            for lo in [a.min(b), a.max(b)] {
                if c >= lo {
                    c += 1;
                }
            }
            [a, b, c]
        })
        .collect();

    // (inliers, mean distance, iteration)
    let best = triplets
        .par_iter()
        .enumerate()
        .filter_map(|(it, t)| {
            let plane = plane_through(&pts[t[0]], &pts[t[1]], &pts[t[2]])?;
            let (count, sum) = pts.iter().fold((0usize, 0.0f64), |(c, s), p| {
                let d = plane.distance(p);
                if d <= dist_threshold {
                    (c + 1, s + d)
                } else {
                    (c, s)
                }
            });
            let mean = if count > 0 { sum / count as f64 } else { f64::INFINITY };
            Some((count, mean, it, plane))
        })
        .min_by(|a, b| b.0.cmp(&a.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));

    let Some((count, _, _, plane)) = best else {
        return Err(SegmentationError::NoPlaneFound(0));
    };
    if count < 3 {
        return Err(SegmentationError::NoPlaneFound(count));
    }
    let seed_inliers: Vec<usize> = (0..n).filter(|&i| plane.distance(&pts[i]) <= dist_threshold).collect();
    let mut refit = fit_plane(seed_inliers.iter().map(|&i| &pts[i])).unwrap_or(plane);
    // Other surfaces touching the plane (an object resting on it, a wall
    // meeting it) leave a thin band of off-plane points inside the
    // threshold. Two trimmed refits drop them from the estimate.
    for _ in 0..2 {
        let mut d: Vec<f64> = seed_inliers.iter().map(|&i| refit.distance(&pts[i])).collect();
        d.sort_by(f64::total_cmp);
        let cut = 3.0 * d[d.len() / 2] + 1e-12;
        let core = seed_inliers.iter().filter(|&&i| refit.distance(&pts[i]) <= cut).map(|&i| &pts[i]);
        match fit_plane(core) {
            Some(p) => refit = p,
            None => break,
        }
    }
    let refit = orient_toward_origin(refit);
    let inliers: Vec<usize> = (0..n).filter(|&i| refit.distance(&pts[i]) <= dist_threshold).collect();
    if inliers.len() < 3 {
        return Err(SegmentationError::NoPlaneFound(inliers.len()));
    }
    Ok((refit, inliers))
}

fn plane_through(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> Option<Plane> {
    let n = (b - a).cross(&(c - a));
    let norm = n.norm();
    let scale = (b - a).norm() * (c - a).norm();
    if !(norm > 1e-12 * scale) || scale == 0.0 {
        return None;
    }
    Some(Plane::through(a, Unit::new_unchecked(n / norm)))
}

/// Least-squares plane: through the centroid, normal along the direction of
/// least variance.
pub fn fit_plane<'a>(points: impl Iterator<Item = &'a Point3<f64>> + Clone) -> Option<Plane> {
    let (sum, n) = points.clone().fold((Vector3::zeros(), 0usize), |(s, n), p| (s + p.coords, n + 1));
    if n < 3 {
        return None;
    }
    let c = Point3::from(sum / n as f64);
    let patch = patch_from(points);
    Some(Plane::through(&c, Unit::new_normalize(patch.normal)))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn orient_toward_origin(p: Plane) -> Plane {
    if p.offset() > 0.0 {
        p.flipped()
    } else {
        p
    }
}

/// Keeps the points farther than `dist_threshold` from `plane`, in order.
pub fn remove_plane(cloud: &PointCloud, plane: &Plane, dist_threshold: f64) -> PointCloud {
    PointCloud::from_finite(cloud.iter().filter(|p| plane.distance(p) > dist_threshold).copied().collect())
}

/// Plane fit, plane removal, clustering, then bore/patient labelling.
///
/// Every cluster is fitted against the known bore shape (shell of the bore
/// radius plus the annular face plate). Among clusters holding at least a
/// fifth as many points as the largest, the one with the smallest median
/// residual is the bore. Other clusters lying on that fitted shape are merged
/// into it. The largest remaining cluster is the patient.
pub fn segment_scene(cloud: &PointCloud, cfg: &SegmentationConfig) -> Result<SegmentationOutput, SegmentationError> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(SegmentationError::DegenerateInput("empty cloud".into()));
    }
    let (table_plane, table_inliers) = ransac_plane(cloud, cfg.ransac_threshold, cfg.ransac_iterations, cfg.seed)?;
    let rest: Vec<usize> =
        (0..cloud.len()).filter(|&i| table_plane.distance(&cloud.points()[i]) > cfg.ransac_threshold).collect();
    let rest_cloud = cloud.select(&rest);
    let clusters = euclidean_cluster_indices(&rest_cloud, cfg.cluster_radius, cfg.cluster_min_points);
    if clusters.len() < 2 {
        return Err(SegmentationError::Failed(format!(
            "{} cluster(s) left after removing the table, need a patient and a bore",
            clusters.len()
        )));
    }

    let fits: Vec<Option<BoreFit>> = clusters
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let c = rest_cloud.select(idx);
            fit_bore(&c, cfg.bore_radius, cfg.face_outer_radius, cfg.ransac_threshold, cfg.seed.wrapping_add(k as u64))
        })
        .collect();
    // Small fragments fit any surface well, so only sizeable clusters compete.
    let min_size = (clusters[0].len() as f64 * BORE_MIN_SHARE).ceil() as usize;
    let bore_k = fits
        .iter()
        .enumerate()
        .filter(|(k, _)| clusters[*k].len() >= min_size)
        .filter_map(|(k, f)| f.map(|f| (k, f.residual)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(k, _)| k)
        .ok_or_else(|| SegmentationError::Failed("no cluster fits the bore model".into()))?;
    let bore_fit = fits[bore_k].expect("bore cluster has a fit");
    let band = 2.0 * cfg.ransac_threshold;
    let mut bore_members = vec![bore_k];
    for (k, idx) in clusters.iter().enumerate() {
        if k == bore_k {
            continue;
        }
        let d: Vec<f64> = idx
            .iter()
            .map(|&i| bore_fit.distance(&rest_cloud.points()[i], cfg.bore_radius, cfg.face_outer_radius))
            .collect();
        if median(d) < band {
            bore_members.push(k);
        }
    }
    // Clusters come sorted by size, so the first remaining one is the largest.
    let patient_k = (0..clusters.len())
        .find(|k| !bore_members.contains(k))
        .ok_or_else(|| SegmentationError::Failed("every cluster matches the bore; no patient found".into()))?;

    let to_input = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| rest[i]).collect() };
    bore_members.sort_unstable();
    let mut bore_indices: Vec<usize> = bore_members.iter().flat_map(|&k| to_input(&clusters[k])).collect();
    bore_indices.sort_unstable();
    let patient_indices = to_input(&clusters[patient_k]);
    log::debug!(
        "segmentation: {} table inliers, {} clusters, bore residual {:.4} m",
        table_inliers.len(),
        clusters.len(),
        bore_fit.residual
    );
    Ok(SegmentationOutput {
        table_plane,
        table_inliers,
        patient: cloud.select(&patient_indices),
        bore: cloud.select(&bore_indices),
        patient_indices,
        bore_indices,
        bore_fit,
    })
}
