use std::time::Instant;

use nalgebra::Point3;
use rayon::prelude::*;

use super::{RegistrationConfig, RegistrationError, RegistrationResult};
use crate::geometry::{fit_rigid, KdTree, PointCloud, RigidTransform};

struct Matches {
    src: Vec<Point3<f64>>,
    dst: Vec<Point3<f64>>,
    mean: f64,
    /// RMS over every source point with unmatched ones counted at the
    /// cut-off. A point-to-point step can never raise it, unlike `mean`,
    /// which is taken over a changing set and is not the fitted objective.
    cost: f64,
}

/// Nearest target point for every transformed source point within
/// `max_dist`. Distances are summed in source order so the mean does not
/// depend on thread scheduling.
fn match_points(source: &PointCloud, tree: &KdTree, t: &RigidTransform, max_dist: f64) -> Matches {
    let max2 = max_dist * max_dist;
    let found: Vec<Option<(Point3<f64>, Point3<f64>, f64)>> = source
        .points()
        .par_iter()
        .map(|p| {
            let q = t.transform_point(p);
            tree.nearest(&q).filter(|&(_, d2)| d2 <= max2).map(|(j, d2)| (q, *tree.point(j), d2.sqrt()))
        })
        .collect();
    let n = found.len();
    let mut m = Matches { src: Vec::new(), dst: Vec::new(), mean: 0.0, cost: 0.0 };
    let (mut sum, mut sum2) = (0.0, 0.0);
    for (q, r, d) in found.into_iter().flatten() {
        m.src.push(q);
        m.dst.push(r);
        sum += d;
        sum2 += d * d;
    }
    if !m.src.is_empty() {
        m.mean = sum / m.src.len() as f64;
    }
    m.cost = ((sum2 + (n - m.src.len()) as f64 * max2) / n.max(1) as f64).sqrt();
    m
}

/// Point-to-point ICP from `init`.
pub fn icp_refine(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    icp_refine_traced(source, target, init, cfg).map(|(r, _)| r)
}

/// [`icp_refine`] that also returns the truncated RMS distance (unmatched
/// points count at the cut-off) after every accepted step, starting at `init`.
///
/// Each iteration matches points within `max_correspondence_dist`, fits a
/// rigid increment to the matches and composes it onto the estimate. A step
/// that would raise the truncated RMS is discarded and ends the loop, as
/// does a decrease smaller than `convergence_eps`.
pub fn icp_refine_traced(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    cfg: &RegistrationConfig,
) -> Result<(RegistrationResult, Vec<f64>), RegistrationError> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(RegistrationError::InvalidParameter("ICP needs non-empty source and target".into()));
    }
    let start = Instant::now();
    let tree = KdTree::build(target.points());
    let result = |t: RigidTransform, m: &Matches, iterations: usize| RegistrationResult {
        transform: t,
        mean_matched_distance: m.mean,
        matched_fraction: m.src.len() as f64 / source.len() as f64,
        icp_iterations: iterations,
        global_inlier_count: 0,
        elapsed_s: start.elapsed().as_secs_f64(),
    };

    let mut t = *init;
    let mut m = match_points(source, &tree, &t, cfg.max_correspondence_dist);
    if m.src.is_empty() {
        return Err(RegistrationError::IcpDiverged { last: Box::new(result(t, &m, 0)) });
    }
    let mut history = vec![m.cost];
    let mut iterations = 0;
    while iterations < cfg.max_icp_iterations {
        let Ok(step) = fit_rigid(&m.src, &m.dst) else {
            break;
        };
        let next_t = step.compose(&t);
        let next = match_points(source, &tree, &next_t, cfg.max_correspondence_dist);
        iterations += 1;
        if next.src.is_empty() {
            return Err(RegistrationError::IcpDiverged { last: Box::new(result(next_t, &next, iterations)) });
        }
        if next.cost > m.cost {
            break;
        }
        let change = m.cost - next.cost;
        t = next_t;
        m = next;
        history.push(m.cost);
        if change < cfg.convergence_eps {
            break;
        }
    }
    Ok((result(t, &m, iterations), history))
}

/// Mean matched distance and matched fraction of `source` under `t`, with
/// the same matching rule as ICP.
pub fn match_statistics(source: &PointCloud, target: &PointCloud, t: &RigidTransform, max_dist: f64) -> (f64, f64) {
    if source.is_empty() || target.is_empty() {
        return (0.0, 0.0);
    }
    let m = match_points(source, &KdTree::build(target.points()), t, max_dist);
    (m.mean, m.src.len() as f64 / source.len() as f64)
}

/// Mean distance from each point of `cloud` to its nearest neighbour in
/// `target`, without a distance cut-off.
pub fn mean_nearest_distance(cloud: &PointCloud, target: &PointCloud) -> Option<f64> {
    if cloud.is_empty() || target.is_empty() {
        return None;
    }
    let tree = KdTree::build(target.points());
    let d: Vec<f64> =
        cloud.points().par_iter().map(|p| tree.nearest(p).map(|(_, d2)| d2.sqrt()).unwrap_or(0.0)).collect();
    Some(d.iter().sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn lumpy_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                let (u, v): (f64, f64) = (rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2));
                Point3::new(u, v, 0.2 * (4.0 * u).sin() * (3.0 * v).cos() + 0.3 * u * v)
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn self_alignment_converges_immediately() {
        let c = lumpy_cloud(2000, 1);
        let r = icp_refine(&c, &c, &RigidTransform::identity(), &RegistrationConfig::default()).unwrap();
        assert!(r.transform.max_abs_diff(&RigidTransform::identity()) < 1e-12);
        assert!(r.mean_matched_distance < 1e-12);
        assert!(r.icp_iterations <= 2);
        assert_eq!(r.matched_fraction, 1.0);
    }

    #[test]
    fn recovers_small_known_motion() {
        let src = lumpy_cloud(3000, 2);
        let truth = RigidTransform::from_axis_angle(Vector3::z(), 10f64.to_radians(), Vector3::new(0.05, 0.0, 0.0));
        let dst = truth.apply(&src);
        let (r, hist) =
            icp_refine_traced(&src, &dst, &RigidTransform::identity(), &RegistrationConfig::default()).unwrap();
        assert!(r.mean_matched_distance <= 1e-6, "mean {}", r.mean_matched_distance);
        assert!(r.transform.translation_distance_to(&truth) <= 1e-6);
        assert!(hist.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn recovers_from_20_degrees_and_10_cm() {
        let src = lumpy_cloud(4000, 5);
        let truth = RigidTransform::from_axis_angle(Vector3::new(0.3, 1.0, -0.2), 20f64.to_radians(), Vector3::new(0.06, -0.05, 0.06));
        let dst = truth.apply(&src);
        let cfg = RegistrationConfig { max_correspondence_dist: 0.2, max_icp_iterations: 200, convergence_eps: 1e-12, ..Default::default() };
        let r = icp_refine(&src, &dst, &RigidTransform::identity(), &cfg).unwrap();
        assert!(r.transform.translation_distance_to(&truth) <= 1e-6, "{}", r.transform.translation_distance_to(&truth));
    }

    #[test]
    fn conjugation_invariance() {
        let src = lumpy_cloud(2000, 6);
        let truth = RigidTransform::from_axis_angle(Vector3::z(), 0.1, Vector3::new(0.02, 0.0, 0.01));
        let dst = truth.apply(&src);
        let g = RigidTransform::from_axis_angle(Vector3::new(1.0, -1.0, 0.5), 0.8, Vector3::new(1.0, 2.0, -3.0));
        let cfg = RegistrationConfig::default();
        let a = icp_refine(&src, &dst, &RigidTransform::identity(), &cfg).unwrap();
        let b = icp_refine(&g.apply(&src), &g.apply(&dst), &RigidTransform::identity(), &cfg).unwrap();
        let expected = g.compose(&a.transform).compose(&g.inverse());
        assert!(b.transform.max_abs_diff(&expected) <= 1e-6);
    }

    #[test]
    fn deterministic() {
        let src = lumpy_cloud(3000, 7);
        let dst = RigidTransform::from_axis_angle(Vector3::y(), 0.05, Vector3::new(0.01, 0.0, 0.0)).apply(&src);
        let cfg = RegistrationConfig::default();
        let run = || icp_refine(&src, &dst, &RigidTransform::identity(), &cfg).map(|r| (r.transform, r.mean_matched_distance, r.icp_iterations)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn flipped_bore_is_never_accepted() {
        use crate::registration::{validate, Verdict};
        use crate::scene::{sample_model_cloud, ScannerModel};
        let model = sample_model_cloud(&ScannerModel::default(), 20000, 1);
        let live = sample_model_cloud(&ScannerModel::default(), 3000, 2);
        let flip = RigidTransform::from_axis_angle(Vector3::y(), std::f64::consts::PI, Vector3::zeros());
        let cfg = RegistrationConfig { max_correspondence_dist: 0.01, ..Default::default() };
        match icp_refine(&live, &model, &flip, &cfg) {
            Err(RegistrationError::IcpDiverged { .. }) => {}
            Ok(r) => assert_eq!(validate(&r, cfg.validation_threshold, cfg.min_matched_fraction), Verdict::RetryRequested),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn far_init_diverges() {
        let c = lumpy_cloud(500, 3);
        let init = RigidTransform::from_translation(Vector3::new(5.0, 0.0, 0.0));
        assert!(matches!(
            icp_refine(&c, &c, &init, &RegistrationConfig::default()),
            Err(RegistrationError::IcpDiverged { .. })
        ));
    }

    #[test]
    fn mean_nearest_distance_of_shifted_plane() {
        let a = PointCloud::new(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]).unwrap();
        let b = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 0.1)).apply(&a);
        assert!((mean_nearest_distance(&a, &b).unwrap() - 0.1).abs() < 1e-12);
    }
}
