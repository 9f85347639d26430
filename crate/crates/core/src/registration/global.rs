use nalgebra::Point3;
use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::descriptor::{compute_descriptors, descriptor_distance2, Descriptor};
use super::{RegistrationConfig, RegistrationError};
use crate::geometry::{estimate_normals, fit_rigid, voxel_subsample_indices, KdTree, PointCloud, RigidTransform};

const NORMAL_K: usize = 10;
/// Greedy cliques grown, one per highest-degree seed vertex.
const CLIQUE_SEEDS: usize = 128;
const REFIT_ROUNDS: usize = 4;
const POLISH_ROUNDS: usize = 10;
/// Surface variation above which a point is not used as a keypoint.
const MAX_KEY_VARIATION: f64 = 0.05;

/// Global registration with its intermediate correspondence sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMatch {
    pub transform: RigidTransform,
    /// Descriptor matches as `(source index, target index)` into the input clouds.
    pub candidates: Vec<(usize, usize)>,
    /// The candidates that survived consistency pruning and the final refit.
    pub inliers: Vec<(usize, usize)>,
    /// Downsampled source points landing near the target under `transform`.
    pub overlap: usize,
}

struct Side {
    /// Input indices of the voxel representatives.
    reps: Vec<usize>,
    points: Vec<Point3<f64>>,
    tree: KdTree,
}

fn side(cloud: &PointCloud, voxel: f64) -> Result<Side, RegistrationError> {
    let reps = voxel_subsample_indices(cloud, voxel)?;
    let points: Vec<Point3<f64>> = reps.iter().map(|&i| cloud.points()[i]).collect();
    let tree = KdTree::build(&points);
    Ok(Side { reps, points, tree })
}

/// Coarse alignment of `source` onto `target` without an initial guess.
pub fn global_register(
    source: &PointCloud,
    target: &PointCloud,
    cfg: &RegistrationConfig,
) -> Result<RigidTransform, RegistrationError> {
    global_register_detailed(source, target, cfg).map(|m| m.transform)
}

/// Descriptor matching followed by pairwise-distance consistency pruning.
///
/// 1. Both clouds are reduced to one representative point per voxel of size
///    `global_voxel`, and up to `global_sample_count` source keypoints are
///    drawn from those with a surface-like neighbourhood.
/// 2. Each keypoint is paired with its `correspondences_per_point` nearest
///    target points in descriptor space.
/// 3. Two candidate pairs are consistent when the source and target
///    distances between them agree to within `2 × global_voxel`. Greedy
///    cliques are grown in this graph from the highest-degree vertices and
///    each is fitted rigidly; the fit that lands the most downsampled source
///    points near the target wins.
/// 4. The winner is refit on every candidate it explains, tightening the
///    residual cut to three times the median residual in later rounds.
/// 5. A few nearest-neighbour rounds on the downsampled clouds polish the pose.
pub fn global_register_detailed(
    source: &PointCloud,
    target: &PointCloud,
    cfg: &RegistrationConfig,
) -> Result<GlobalMatch, RegistrationError> {
    global_register_oriented(source, target, None, cfg)
}

/// [`global_register_detailed`] with normals oriented toward a viewpoint on
/// each side, `(source viewpoint, target viewpoint)`. A downsampled source
/// point then only counts as overlapping when its transformed normal agrees
/// in sign with the target normal it lands on, which rules out poses that
/// see a one-sided surface from behind.
pub fn global_register_oriented(
    source: &PointCloud,
    target: &PointCloud,
    viewpoints: Option<(Point3<f64>, Point3<f64>)>,
    cfg: &RegistrationConfig,
) -> Result<GlobalMatch, RegistrationError> {
    cfg.validate()?;
    let v = cfg.global_voxel;
    let tol = 2.0 * v;
    let src = side(source, v)?;
    let tgt = side(target, v)?;
    if src.points.len() < cfg.global_sample_count || tgt.points.len() < cfg.global_sample_count {
        return Err(RegistrationError::GlobalFailed(format!(
            "need {} points after downsampling, have {} source and {} target",
            cfg.global_sample_count,
            src.points.len(),
            tgt.points.len()
        )));
    }

    let src_normals = estimate_normals(&src.points, &src.tree, NORMAL_K, viewpoints.map(|v| v.0));
    let tgt_normals = estimate_normals(&tgt.points, &tgt.tree, NORMAL_K, viewpoints.map(|v| v.1));
    let oriented = viewpoints.is_some();
    // Whether source point `i` under `t` lands on target point `j` from the visible side.
    let facing = |t: &RigidTransform, i: usize, j: usize| {
        !oriented || t.transform_vector(&src_normals[i].normal).dot(&tgt_normals[j].normal) > 0.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Keypoints come from surface-like neighbourhoods only; scattered
    // outliers have near-isotropic ones.
    let pool: Vec<usize> = (0..src.points.len()).filter(|&i| src_normals[i].variation <= MAX_KEY_VARIATION).collect();
    if pool.len() < 3 {
        return Err(RegistrationError::GlobalFailed("fewer than 3 surface-like source keypoints".into()));
    }
    let mut keys: Vec<usize> =
        sample(&mut rng, pool.len(), cfg.global_sample_count.min(pool.len())).into_iter().map(|i| pool[i]).collect();
    keys.sort_unstable();
    let src_desc = compute_descriptors(&keys, &src.points, &src.tree, &src_normals, cfg.descriptor_radius, v);
    let all_tgt: Vec<usize> = (0..tgt.points.len()).collect();
    let tgt_desc = compute_descriptors(&all_tgt, &tgt.points, &tgt.tree, &tgt_normals, cfg.descriptor_radius, v);

    // Candidate pairs in downsampled indices.
    let k = cfg.correspondences_per_point.min(tgt_desc.len());
    let cand: Vec<(usize, usize)> = keys
        .par_iter()
        .zip(src_desc.par_iter())
        .flat_map_iter(|(&s, d)| nearest_descriptors(d, &tgt_desc, k).into_iter().map(move |t| (s, t)))
        .collect();

    let adjacency = consistency_graph(&cand, &src.points, &tgt.points, tol, v);
    let degree: Vec<usize> = adjacency.iter().map(|row| row.iter().map(|w| w.count_ones() as usize).sum()).collect();
    let mut order: Vec<usize> = (0..cand.len()).collect();
    order.sort_by(|&a, &b| degree[b].cmp(&degree[a]).then(a.cmp(&b)));

    let overlap_of = |t: &RigidTransform| -> usize {
        src.points
            .iter()
            .enumerate()
            .filter(|(i, p)| {
                tgt.tree.nearest(&t.transform_point(p)).is_some_and(|(j, d2)| d2 <= tol * tol && facing(t, *i, j))
            })
            .count()
    };

    let best = order
        .par_iter()
        .take(CLIQUE_SEEDS)
        .enumerate()
        .filter_map(|(rank, &seed)| {
            let clique = grow_clique(seed, &adjacency, &degree);
            if clique.len() < 3 {
                return None;
            }
            let t = fit_pairs(&cand, &clique, &src.points, &tgt.points)?;
            Some((overlap_of(&t), clique.len(), rank, t, clique))
        })
        .max_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(b.2.cmp(&a.2)));
    let Some((_, _, _, mut transform, clique)) = best else {
        return Err(RegistrationError::GlobalFailed("fewer than 3 mutually consistent correspondences".into()));
    };

    let residual = |t: &RigidTransform, &(s, g): &(usize, usize)| (t.transform_point(&src.points[s]) - tgt.points[g]).norm();
    let mut cut = tol;
    let mut kept = clique;
    for round in 0..REFIT_ROUNDS {
        let res: Vec<f64> = cand.iter().map(|c| residual(&transform, c)).collect();
        if round > 0 {
            let mut inl: Vec<f64> = kept.iter().map(|&i| res[i]).collect();
            inl.sort_by(f64::total_cmp);
            if let Some(&m) = inl.get(inl.len() / 2) {
                cut = cut.min((3.0 * m).max(1e-9));
            }
        }
        let next: Vec<usize> = (0..cand.len()).filter(|&i| res[i] <= cut).collect();
        if next.len() < 3 {
            break;
        }
        match fit_pairs(&cand, &next, &src.points, &tgt.points) {
            Some(t) => {
                transform = t;
                kept = next;
            }
            None => break,
        }
    }
    if kept.len() < 3 {
        return Err(RegistrationError::GlobalFailed(format!("only {} correspondences survived", kept.len())));
    }
    transform = polish(transform, &src.points, &tgt.tree, tol, &facing);

    let to_input = |&(s, t): &(usize, usize)| (src.reps[s], tgt.reps[t]);
    Ok(GlobalMatch {
        overlap: overlap_of(&transform),
        transform,
        candidates: cand.iter().map(to_input).collect(),
        inliers: kept.iter().map(|&i| to_input(&cand[i])).collect(),
    })
}

/// Coarse nearest-neighbour refinement on the downsampled clouds. The cut
/// shrinks linearly from `2 × tol` to `tol` so a pose a few degrees off can
/// still pull itself in; a round that lowers the overlap is discarded.
fn polish<F>(mut t: RigidTransform, src: &[Point3<f64>], tgt: &KdTree, tol: f64, facing: &F) -> RigidTransform
where
    F: Fn(&RigidTransform, usize, usize) -> bool + Sync,
{
    let matched = |t: &RigidTransform, cut: f64| -> (Vec<Point3<f64>>, Vec<Point3<f64>>) {
        src.par_iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let q = t.transform_point(p);
                tgt.nearest(&q)
                    .filter(|&(j, d2)| d2 <= cut * cut && facing(t, i, j))
                    .map(|(j, _)| (*p, *tgt.point(j)))
            })
            .unzip()
    };
    let mut best = matched(&t, tol).0.len();
    for round in 0..POLISH_ROUNDS {
        let cut = tol * (2.0 - round as f64 / (POLISH_ROUNDS - 1) as f64);
        let (s, d) = matched(&t, cut);
        let Ok(next) = fit_rigid(&s, &d) else {
            break;
        };
        let n = matched(&next, tol).0.len();
        if n < best {
            break;
        }
        best = n;
        t = next;
    }
    t
}

fn nearest_descriptors(d: &Descriptor, all: &[Descriptor], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = all.iter().enumerate().map(|(i, t)| (descriptor_distance2(d, t), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Bitset adjacency: pairs `a`, `b` are linked when they use distinct points
/// on both sides, the points are at least `min_sep` apart, and the source and
/// target distances agree within `tol`.
fn consistency_graph(
    cand: &[(usize, usize)],
    src: &[Point3<f64>],
    tgt: &[Point3<f64>],
    tol: f64,
    min_sep: f64,
) -> Vec<Vec<u64>> {
    let words = cand.len().div_ceil(64);
    cand.par_iter()
        .enumerate()
        .map(|(a, &(sa, ta))| {
            let mut row = vec![0u64; words];
            for (b, &(sb, tb)) in cand.iter().enumerate() {
                if a == b || sa == sb || ta == tb {
                    continue;
                }
                let ds = (src[sa] - src[sb]).norm();
                let dt = (tgt[ta] - tgt[tb]).norm();
                if ds >= min_sep && (ds - dt).abs() <= tol {
                    row[b / 64] |= 1 << (b % 64);
                }
            }
            row
        })
        .collect()
}

fn linked(adj: &[Vec<u64>], a: usize, b: usize) -> bool {
    adj[a][b / 64] & (1 << (b % 64)) != 0
}

/// Adds neighbours of `seed` in decreasing-degree order whenever they link
/// to every member so far.
fn grow_clique(seed: usize, adj: &[Vec<u64>], degree: &[usize]) -> Vec<usize> {
    let mut nbrs: Vec<usize> = (0..adj.len()).filter(|&b| linked(adj, seed, b)).collect();
    nbrs.sort_by(|&a, &b| degree[b].cmp(&degree[a]).then(a.cmp(&b)));
    let mut clique = vec![seed];
    for b in nbrs {
        if clique.iter().all(|&c| linked(adj, c, b)) {
            clique.push(b);
        }
    }
    clique
}

fn fit_pairs(
    cand: &[(usize, usize)],
    chosen: &[usize],
    src: &[Point3<f64>],
    tgt: &[Point3<f64>],
) -> Option<RigidTransform> {
    let s: Vec<Point3<f64>> = chosen.iter().map(|&i| src[cand[i].0]).collect();
    let t: Vec<Point3<f64>> = chosen.iter().map(|&i| tgt[cand[i].1]).collect();
    fit_rigid(&s, &t).ok()
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;
    use rand::Rng;

    use super::*;
    use crate::scene::{sample_model_cloud, ScannerModel};

    fn bore_cloud(n: usize, seed: u64) -> PointCloud {
        sample_model_cloud(&ScannerModel::default(), n, seed)
    }

    #[test]
    fn self_alignment_is_identity() {
        let c = bore_cloud(8000, 1);
        let t = global_register(&c, &c, &RegistrationConfig::default()).unwrap();
        assert!(t.max_abs_diff(&RigidTransform::identity()) < 1e-6, "{t:?}");
    }

    #[test]
    fn recovers_known_transform() {
        let src = bore_cloud(8000, 2);
        let truth = RigidTransform::from_axis_angle(Vector3::new(0.2, -1.0, 0.4), 2.5, Vector3::new(0.4, 0.1, 1.5));
        let dst = truth.apply(&src);
        let t = global_register(&src, &dst, &RegistrationConfig::default()).unwrap();
        assert!(t.rotation_angle_to(&truth).to_degrees() <= 1.0, "rotation off by {}", t.rotation_angle_to(&truth).to_degrees());
        assert!(t.translation_distance_to(&truth) <= 0.005);
    }

    #[test]
    fn pruning_drops_outlier_correspondences() {
        let target = bore_cloud(12000, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let keep = sample(&mut rng, target.len(), target.len() / 2).into_vec();
        let mut pts: Vec<Point3<f64>> = keep.iter().map(|&i| target.points()[i]).collect();
        let n_in = pts.len();
        for _ in 0..n_in {
            pts.push(Point3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-1.6..0.0)));
        }
        let source = PointCloud::new(pts).unwrap();
        let vp = Point3::new(0.0, 0.0, 1.0);
        let m = global_register_oriented(&source, &target, Some((vp, vp)), &RegistrationConfig::default()).unwrap();
        // Ground-truth pairing: the source is a subset of the target, so a
        // correspondence is right when both ends are (nearly) the same point.
        let tol = 2.0 * RegistrationConfig::default().global_voxel;
        let wrong = |&(s, t): &(usize, usize)| s >= n_in || (source.points()[s] - target.points()[t]).norm() > tol;
        let before = m.candidates.iter().filter(|c| wrong(c)).count();
        let after = m.inliers.iter().filter(|c| wrong(c)).count();
        assert!(before > 0);
        assert!((after as f64) <= 0.1 * before as f64, "{after} of {before} wrong pairs kept");
    }

    #[test]
    fn too_small_cloud_fails() {
        let c = bore_cloud(20, 1);
        assert!(matches!(
            global_register(&c, &c, &RegistrationConfig::default()),
            Err(RegistrationError::GlobalFailed(_))
        ));
    }
}
