use std::collections::HashMap;

use crate::geometry::{voxel_key, PointCloud};

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // Smaller root wins so the forest shape does not depend on visit order.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Single-linkage components as index lists into `cloud`.
///
/// Points are bucketed on a grid of cell size `link_radius`, so each point
/// only checks the 27 surrounding cells. Components with fewer than
/// `min_points` members are dropped. Output is sorted by size (descending),
/// then centroid x (ascending); members keep input order.
pub fn euclidean_cluster_indices(cloud: &PointCloud, link_radius: f64, min_points: usize) -> Vec<Vec<usize>> {
    assert!(link_radius > 0.0, "link_radius must be positive");
    let pts = cloud.points();
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in pts.iter().enumerate() {
        grid.entry(voxel_key(p, link_radius)).or_default().push(i);
    }
    let r2 = link_radius * link_radius;
    let mut parent: Vec<usize> = (0..pts.len()).collect();
    for (i, p) in pts.iter().enumerate() {
        let k = voxel_key(p, link_radius);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(cell) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for &j in cell {
                        if j > i && (pts[j] - p).norm_squared() <= r2 {
                            union(&mut parent, i, j);
                        }
                    }
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..pts.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<(f64, Vec<usize>)> = groups
        .into_values()
        .filter(|g| g.len() >= min_points.max(1))
        .map(|g| {
            // Sum in sorted-coordinate order so the centroid is permutation-invariant.
            let mut xs: Vec<f64> = g.iter().map(|&i| pts[i].x).collect();
            xs.sort_by(f64::total_cmp);
            (xs.iter().sum::<f64>() / xs.len() as f64, g)
        })
        .collect();
    out.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.total_cmp(&b.0)).then(a.1[0].cmp(&b.1[0])));
    out.into_iter().map(|(_, g)| g).collect()
}

pub fn euclidean_clusters(cloud: &PointCloud, link_radius: f64, min_points: usize) -> Vec<PointCloud> {
    euclidean_cluster_indices(cloud, link_radius, min_points).iter().map(|g| cloud.select(g)).collect()
}
