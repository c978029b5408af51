//! Dividing a point cloud into M patches of exactly K points.
//!
//! Four interchangeable grouping strategies sit behind the same
//! [`PatchSet`] contract:
//!
//! * ball query — all points within a fixed radius of each key, padded by
//!   cyclic duplication (overlapping patches, consistent spatial scale);
//! * kNN — the K nearest points per key (overlapping);
//! * k-means — Lloyd clustering seeded from the key points (non-overlapping);
//! * farthest point clustering — every point goes to its nearest key, then
//!   each cluster is reduced to exactly K (non-overlapping).
//!
//! Within a patch, points are kept in ascending original index order; the
//! downstream patch embedding max-pools over the patch, so ordering is
//! unobservable there, but determinism keeps every test reproducible.

use crate::error::{Error, Result};
use crate::geom::{
    farthest_point_sampling, knn_search, nearest_key_assignment, sq_dist, GridIndex, KeyPoints,
    PointCloud,
};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Ball,
    Knn,
    Kmeans,
    Fpc,
}

impl Grouping {
    pub fn name(&self) -> &'static str {
        match self {
            Grouping::Ball => "ball",
            Grouping::Knn => "knn",
            Grouping::Kmeans => "kmeans",
            Grouping::Fpc => "fpc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ball" => Ok(Grouping::Ball),
            "knn" => Ok(Grouping::Knn),
            "kmeans" => Ok(Grouping::Kmeans),
            "fpc" => Ok(Grouping::Fpc),
            other => Err(Error::invalid(format!(
                "unknown grouping `{other}` (expected ball|knn|kmeans|fpc)"
            ))),
        }
    }
}

/// M key points plus an `M × K` assignment matrix of point indices.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub keys: KeyPoints,
    /// Row-major `M × K` indices into the parent cloud.
    pub assign: Vec<usize>,
    pub k: usize,
    pub grouping: Grouping,
    /// Ball grouping only.
    pub radius: Option<f64>,
    /// Points per patch before duplication (for FPC/k-means: the raw,
    /// untruncated cluster size; for ball: the raw in-radius count; for kNN:
    /// always K).
    pub pre_dup_counts: Vec<usize>,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.keys.len()
    }

    pub fn patch(&self, m: usize) -> &[usize] {
        &self.assign[m * self.k..(m + 1) * self.k]
    }
}

/// Per key, collect in-radius points in ascending index order up to `k`.
/// Fewer than `k` hits are padded by cyclic duplication; an empty sphere
/// falls back to the key's own source point repeated `k` times.
pub fn ball_query_group(
    pc: &PointCloud,
    keys: &KeyPoints,
    k: usize,
    radius: f64,
) -> Result<PatchSet> {
    if !radius.is_finite() || radius <= 0.0 {
        return Err(Error::invalid(format!(
            "ball query radius {radius} must be positive"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("ball query needs k >= 1"));
    }
    let grid = GridIndex::build(pc.coords(), radius)?;
    let m = keys.len();
    let mut assign = Vec::with_capacity(m * k);
    let mut pre_dup = Vec::with_capacity(m);
    for (ki, &kc) in keys.coords.iter().enumerate() {
        let found = grid.query_radius(kc, radius);
        pre_dup.push(found.len());
        if found.is_empty() {
            assign.extend(std::iter::repeat_n(keys.source_indices[ki], k));
        } else {
            for j in 0..k {
                assign.push(found[j % found.len().min(k)]);
            }
        }
    }
    Ok(PatchSet {
        keys: keys.clone(),
        assign,
        k,
        grouping: Grouping::Ball,
        radius: Some(radius),
        pre_dup_counts: pre_dup,
    })
}

/// Rows are k-nearest-neighbor search results; patches overlap whenever
/// `M·k > N`.
pub fn knn_group(pc: &PointCloud, keys: &KeyPoints, k: usize) -> Result<PatchSet> {
    let assign = knn_search(&keys.coords, pc.coords(), k)?;
    Ok(PatchSet {
        keys: keys.clone(),
        assign,
        k,
        grouping: Grouping::Knn,
        radius: None,
        pre_dup_counts: vec![k; keys.len()],
    })
}

/// How a cluster larger than K is reduced: deterministic truncation of the
/// index-ordered list, or a seeded random sample (training parity with the
/// sampling spirit of ball query).
pub enum ClusterReduce<'a> {
    Truncate,
    Sample(&'a mut Rng),
}

/// Nearest-key clustering: every point joins its nearest key's patch, then
/// each cluster is brought to exactly `k` members (truncate or sample when
/// larger, cyclically duplicate when smaller). Patches never overlap before
/// duplication.
pub fn fpc_group(pc: &PointCloud, keys: &KeyPoints, k: usize) -> Result<PatchSet> {
    fpc_group_with(pc, keys, k, ClusterReduce::Truncate)
}

pub fn fpc_group_with(
    pc: &PointCloud,
    keys: &KeyPoints,
    k: usize,
    mut reduce: ClusterReduce<'_>,
) -> Result<PatchSet> {
    if k == 0 {
        return Err(Error::invalid("fpc grouping needs k >= 1"));
    }
    let assignment = nearest_key_assignment(pc, keys);
    let m = keys.len();
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &t) in assignment.iter().enumerate() {
        clusters[t].push(i); // ascending by construction
    }
    let mut assign = Vec::with_capacity(m * k);
    let mut pre_dup = Vec::with_capacity(m);
    for (ci, cluster) in clusters.iter().enumerate() {
        // Each key's own source point sits at distance 0 from the key, so an
        // empty cluster can only arise from coincident keys losing the tie.
        assert!(
            !cluster.is_empty(),
            "fpc: key {ci} received no points (coincident key points?)"
        );
        pre_dup.push(cluster.len());
        let kept: Vec<usize> = if cluster.len() <= k {
            cluster.clone()
        } else {
            match &mut reduce {
                ClusterReduce::Truncate => cluster[..k].to_vec(),
                ClusterReduce::Sample(rng) => {
                    let mut pool = cluster.clone();
                    rng.shuffle(&mut pool);
                    pool.truncate(k);
                    pool.sort_unstable();
                    pool
                }
            }
        };
        for j in 0..k {
            assign.push(kept[j % kept.len()]);
        }
    }
    Ok(PatchSet {
        keys: keys.clone(),
        assign,
        k,
        grouping: Grouping::Fpc,
        radius: None,
        pre_dup_counts: pre_dup,
    })
}

/// Lloyd k-means from the key points as initial centroids. Assignment ties
/// break to the lowest centroid index; an empty cluster is reseeded with the
/// point farthest from its currently assigned centroid. Final clusters are
/// reduced to exactly `k` members the same way FPC does, and each patch's
/// key is the cluster member nearest its final centroid.
pub fn kmeans_group(
    pc: &PointCloud,
    keys_init: &KeyPoints,
    k: usize,
    max_iters: usize,
) -> Result<PatchSet> {
    if max_iters == 0 {
        return Err(Error::invalid("kmeans needs max_iters >= 1"));
    }
    if k == 0 {
        return Err(Error::invalid("kmeans grouping needs k >= 1"));
    }
    let coords = pc.coords();
    let n = coords.len();
    let m = keys_init.len();
    if m > n {
        return Err(Error::invalid(format!(
            "kmeans: {m} centroids for {n} points"
        )));
    }
    let mut centroids: Vec<[f64; 3]> = keys_init.coords.clone();
    let mut assignment: Vec<usize> = vec![usize::MAX; n];

    for _ in 0..max_iters {
        // Assignment pass.
        let mut next: Vec<usize> = coords
            .iter()
            .map(|&p| {
                let mut best = f64::INFINITY;
                let mut best_j = 0;
                for (j, &c) in centroids.iter().enumerate() {
                    let d = sq_dist(p, c);
                    if d < best {
                        best = d;
                        best_j = j;
                    }
                }
                best_j
            })
            .collect();

        // Reseed empty clusters, lowest cluster index first, each time with
        // the point farthest from its assigned centroid (ties: lowest point
        // index) among clusters that can spare a member.
        let mut sizes = vec![0usize; m];
        for &a in &next {
            sizes[a] += 1;
        }
        for cj in 0..m {
            if sizes[cj] > 0 {
                continue;
            }
            let mut far = -1.0;
            let mut far_i = usize::MAX;
            for (i, &a) in next.iter().enumerate() {
                if sizes[a] <= 1 {
                    continue;
                }
                let d = sq_dist(coords[i], centroids[a]);
                if d > far {
                    far = d;
                    far_i = i;
                }
            }
            assert!(
                far_i != usize::MAX,
                "kmeans: cannot reseed empty cluster {cj}"
            );
            sizes[next[far_i]] -= 1;
            next[far_i] = cj;
            sizes[cj] = 1;
        }

        let converged = next == assignment;
        assignment = next;

        // Centroid update.
        let mut sums = vec![[0.0f64; 3]; m];
        let mut counts = vec![0usize; m];
        for (i, &a) in assignment.iter().enumerate() {
            for (s, &v) in sums[a].iter_mut().zip(&coords[i]) {
                *s += v;
            }
            counts[a] += 1;
        }
        for j in 0..m {
            for s in sums[j].iter_mut() {
                *s /= counts[j] as f64;
            }
            centroids[j] = sums[j];
        }

        if converged {
            break;
        }
    }

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &a) in assignment.iter().enumerate() {
        clusters[a].push(i);
    }

    // Patch keys: the member nearest the final centroid, ties to the lowest
    // point index. Members are disjoint across clusters, so keys stay unique.
    let mut key_indices = Vec::with_capacity(m);
    for (j, cluster) in clusters.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_i = usize::MAX;
        for &i in cluster {
            let d = sq_dist(coords[i], centroids[j]);
            if d < best {
                best = d;
                best_i = i;
            }
        }
        key_indices.push(best_i);
    }

    let mut assign = Vec::with_capacity(m * k);
    let mut pre_dup = Vec::with_capacity(m);
    for cluster in &clusters {
        pre_dup.push(cluster.len());
        let kept: &[usize] = if cluster.len() <= k {
            cluster
        } else {
            &cluster[..k]
        };
        for j in 0..k {
            assign.push(kept[j % kept.len()]);
        }
    }

    Ok(PatchSet {
        keys: KeyPoints {
            coords: key_indices.iter().map(|&i| coords[i]).collect(),
            source_indices: key_indices,
        },
        assign,
        k,
        grouping: Grouping::Kmeans,
        radius: None,
        pre_dup_counts: pre_dup,
    })
}

/// FPS sub-sampling followed by the requested grouping; the one-stop
/// patchifier the pipeline uses.
pub fn build_patches(
    pc: &PointCloud,
    m: usize,
    k: usize,
    grouping: Grouping,
    radius: f64,
    kmeans_iters: usize,
) -> Result<PatchSet> {
    let keys = farthest_point_sampling(pc, m)?;
    match grouping {
        Grouping::Ball => ball_query_group(pc, &keys, k, radius),
        Grouping::Knn => knn_group(pc, &keys, k),
        Grouping::Kmeans => kmeans_group(pc, &keys, k, kmeans_iters),
        Grouping::Fpc => fpc_group(pc, &keys, k),
    }
}

/// Patch tensors ready for embedding: per-point offsets from the patch key
/// (the same centering the reconstruction targets use) plus gathered,
/// uncentered extra channels.
#[derive(Debug, Clone)]
pub struct PatchTensor {
    pub m: usize,
    pub k: usize,
    /// Row-major `M × K × 3`.
    pub offsets: Vec<f64>,
    /// Row-major `M × K × width`.
    pub extras: Option<(usize, Vec<f64>)>,
    pub key_coords: Vec<[f64; 3]>,
}

pub fn gather_patches(pc: &PointCloud, ps: &PatchSet) -> PatchTensor {
    let m = ps.num_patches();
    let k = ps.k;
    let coords = pc.coords();
    let mut offsets = Vec::with_capacity(m * k * 3);
    for mi in 0..m {
        let key = ps.keys.coords[mi];
        for &pi in ps.patch(mi) {
            let p = coords[pi];
            offsets.push(p[0] - key[0]);
            offsets.push(p[1] - key[1]);
            offsets.push(p[2] - key[2]);
        }
    }
    let extras = pc.extras().map(|e| {
        let mut data = Vec::with_capacity(m * k * e.width);
        for mi in 0..m {
            for &pi in ps.patch(mi) {
                data.extend_from_slice(&e.data[pi * e.width..(pi + 1) * e.width]);
            }
        }
        (e.width, data)
    });
    PatchTensor {
        m,
        k,
        offsets,
        extras,
        key_coords: ps.keys.coords.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn keys_at(pc: &PointCloud, indices: &[usize]) -> KeyPoints {
        KeyPoints {
            coords: indices.iter().map(|&i| pc.coords()[i]).collect(),
            source_indices: indices.to_vec(),
        }
    }

    fn random_cloud(rng: &mut Rng, n: usize) -> PointCloud {
        let coords = (0..n)
            .map(|_| {
                [
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                    rng.range(-1.0, 1.0),
                ]
            })
            .collect();
        PointCloud::new(coords).unwrap()
    }

    #[test]
    fn ball_excludes_points_outside_radius() {
        let pc = cloud(&[[0.0; 3], [0.3, 0.0, 0.0]]);
        let keys = keys_at(&pc, &[0]);
        let ps = ball_query_group(&pc, &keys, 4, 0.2).unwrap();
        assert!(ps.patch(0).iter().all(|&i| i == 0));
        assert_eq!(ps.pre_dup_counts, vec![1]);
    }

    #[test]
    fn ball_duplicates_single_hit() {
        let pc = cloud(&[[0.0; 3], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let keys = keys_at(&pc, &[1]);
        // Radius keeps points 0 and 1; push radius down to isolate point 1.
        let ps = ball_query_group(&pc, &keys, 4, 0.05).unwrap();
        assert_eq!(ps.patch(0), &[1, 1, 1, 1]);
    }

    #[test]
    fn ball_empty_sphere_falls_back_to_key_index() {
        let pc = cloud(&[[0.0; 3], [10.0, 0.0, 0.0]]);
        let mut keys = keys_at(&pc, &[1]);
        // Move the key far from every point so the sphere is empty.
        keys.coords[0] = [100.0, 100.0, 100.0];
        let ps = ball_query_group(&pc, &keys, 3, 0.2).unwrap();
        assert_eq!(ps.patch(0), &[1, 1, 1]);
        assert_eq!(ps.pre_dup_counts, vec![0]);
    }

    #[test]
    fn ball_cyclic_duplication_order() {
        let pc = cloud(&[[0.0; 3], [0.05, 0.0, 0.0], [0.1, 0.0, 0.0], [9.0, 0.0, 0.0]]);
        let keys = keys_at(&pc, &[0]);
        let ps = ball_query_group(&pc, &keys, 7, 0.2).unwrap();
        assert_eq!(ps.patch(0), &[0, 1, 2, 0, 1, 2, 0]);
        assert_eq!(ps.pre_dup_counts, vec![3]);
    }

    #[test]
    fn ball_membership_invariant_under_storage_order() {
        // Shuffling point storage changes which K survive truncation (the
        // ordering rule is index-based) but never the in-radius membership.
        let mut rng = Rng::new(8);
        let pc = random_cloud(&mut rng, 120);
        let keys = farthest_point_sampling(&pc, 5).unwrap();
        let ps = ball_query_group(&pc, &keys, 6, 0.5).unwrap();

        let mut perm: Vec<usize> = (0..120).collect();
        rng.shuffle(&mut perm);
        let shuffled = PointCloud::new(perm.iter().map(|&i| pc.coords()[i]).collect()).unwrap();
        let inverse: Vec<usize> = {
            let mut inv = vec![0; 120];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            inv
        };
        let keys2 = KeyPoints {
            coords: keys.coords.clone(),
            source_indices: keys.source_indices.iter().map(|&i| inverse[i]).collect(),
        };
        let ps2 = ball_query_group(&shuffled, &keys2, 6, 0.5).unwrap();
        assert_eq!(ps.pre_dup_counts, ps2.pre_dup_counts);
        for m in 0..5 {
            // Same in-radius point sets, expressed in each ordering.
            let set1: std::collections::BTreeSet<usize> =
                ps.patch(m).iter().map(|&i| inverse[i]).collect();
            let set2: std::collections::BTreeSet<usize> = ps2.patch(m).iter().copied().collect();
            if ps.pre_dup_counts[m] <= 6 {
                assert_eq!(set1, set2, "patch {m}");
            }
        }
    }

    #[test]
    fn knn_with_k_equal_n_fully_overlaps() {
        let mut rng = Rng::new(1);
        let pc = random_cloud(&mut rng, 8);
        let keys = keys_at(&pc, &[0, 3]);
        let ps = knn_group(&pc, &keys, 8).unwrap();
        for m in 0..2 {
            let mut sorted = ps.patch(m).to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn knn_separated_clusters_recover_membership() {
        // Two clusters far apart; keys at each cluster's first point.
        let pc = cloud(&[
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.0, 0.1, 0.0],
            [50.0, 0.0, 0.0],
            [50.1, 0.0, 0.0],
            [50.0, 0.1, 0.0],
        ]);
        let keys = keys_at(&pc, &[0, 3]);
        let ps = knn_group(&pc, &keys, 3).unwrap();
        let mut p0 = ps.patch(0).to_vec();
        let mut p1 = ps.patch(1).to_vec();
        p0.sort_unstable();
        p1.sort_unstable();
        assert_eq!(p0, vec![0, 1, 2]);
        assert_eq!(p1, vec![3, 4, 5]);
    }

    #[test]
    fn knn_overlap_when_patches_exceed_points() {
        let mut rng = Rng::new(2);
        let pc = random_cloud(&mut rng, 10);
        let keys = keys_at(&pc, &[0, 1, 2, 3]);
        let ps = knn_group(&pc, &keys, 4).unwrap(); // M·k = 16 > 10
        let mut seen = std::collections::HashSet::new();
        let mut dup = false;
        for m in 0..4 {
            for &i in ps.patch(m) {
                dup |= !seen.insert((m, i)) || (0..m).any(|pm| ps.patch(pm).contains(&i));
            }
        }
        assert!(dup, "pigeonhole forces overlap");
    }

    #[test]
    fn fpc_collinear_example() {
        let pc = cloud(&[
            [0.0; 3],
            [1.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [11.0, 0.0, 0.0],
        ]);
        let keys = keys_at(&pc, &[0, 2]);
        let ps = fpc_group(&pc, &keys, 2).unwrap();
        assert_eq!(ps.patch(0), &[0, 1]);
        assert_eq!(ps.patch(1), &[2, 3]);
        assert_eq!(ps.pre_dup_counts, vec![2, 2]);
    }

    #[test]
    fn fpc_duplicates_singleton_cluster() {
        let pc = cloud(&[
            [0.0; 3],
            [10.0, 0.0, 0.0],
            [10.1, 0.0, 0.0],
            [10.2, 0.0, 0.0],
        ]);
        let keys = keys_at(&pc, &[0, 1]);
        let ps = fpc_group(&pc, &keys, 3).unwrap();
        assert_eq!(ps.patch(0), &[0, 0, 0]);
        assert_eq!(ps.pre_dup_counts[0], 1);
    }

    #[test]
    fn fpc_truncates_and_records_raw_sizes() {
        let pc = cloud(&[[0.0; 3], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [9.0, 0.0, 0.0]]);
        let keys = keys_at(&pc, &[0, 3]);
        let ps = fpc_group(&pc, &keys, 2).unwrap();
        assert_eq!(ps.patch(0), &[0, 1]); // truncated from {0,1,2}
        assert_eq!(ps.pre_dup_counts, vec![3, 1]);
    }

    #[test]
    fn fpc_sampled_mode_is_deterministic_per_seed() {
        let mut rng = Rng::new(3);
        let pc = random_cloud(&mut rng, 64);
        let keys = farthest_point_sampling(&pc, 4).unwrap();
        let mut r1 = Rng::new(7);
        let mut r2 = Rng::new(7);
        let a = fpc_group_with(&pc, &keys, 8, ClusterReduce::Sample(&mut r1)).unwrap();
        let b = fpc_group_with(&pc, &keys, 8, ClusterReduce::Sample(&mut r2)).unwrap();
        assert_eq!(a.assign, b.assign);
        // Sampled members still come from the right cluster.
        let t = nearest_key_assignment(&pc, &keys);
        for m in 0..4 {
            for &i in a.patch(m) {
                assert_eq!(t[i], m);
            }
        }
    }

    #[test]
    fn fpc_and_kmeans_partition_the_cloud() {
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            let pc = random_cloud(&mut rng, 256);
            let keys = farthest_point_sampling(&pc, 16).unwrap();
            for ps in [
                fpc_group(&pc, &keys, 16).unwrap(),
                kmeans_group(&pc, &keys, 16, 20).unwrap(),
            ] {
                let mut seen = vec![false; 256];
                for m in 0..16 {
                    let mut uniq: Vec<usize> = ps.patch(m).to_vec();
                    uniq.sort_unstable();
                    uniq.dedup();
                    for &i in &uniq {
                        assert!(!seen[i], "{:?}: point {i} in two patches", ps.grouping);
                        seen[i] = true;
                    }
                }
                if ps.grouping == Grouping::Fpc {
                    // FPC covers only when clusters are not truncated; with
                    // truncation the union of pre-dup clusters still covers.
                    let total: usize = ps.pre_dup_counts.iter().sum();
                    assert_eq!(total, 256);
                }
            }
        }
    }

    #[test]
    fn kmeans_two_symmetric_clusters_converge_in_one_iteration() {
        let pc = cloud(&[
            [-1.0, 0.0, 0.0],
            [-1.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        let keys = keys_at(&pc, &[0, 2]);
        let ps = kmeans_group(&pc, &keys, 2, 1).unwrap();
        assert_eq!(ps.patch(0), &[0, 1]);
        assert_eq!(ps.patch(1), &[2, 3]);
    }

    #[test]
    fn kmeans_rejects_zero_iterations() {
        let pc = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let keys = keys_at(&pc, &[0]);
        assert!(kmeans_group(&pc, &keys, 1, 0).is_err());
    }

    #[test]
    fn kmeans_single_cluster_takes_everything() {
        let mut rng = Rng::new(4);
        let pc = random_cloud(&mut rng, 12);
        let keys = keys_at(&pc, &[5]);
        let ps = kmeans_group(&pc, &keys, 12, 5).unwrap();
        let mut sorted = ps.patch(0).to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn kmeans_reseeds_empty_clusters() {
        // Second centroid starts so far away that no point picks it.
        let pc = cloud(&[[0.0; 3], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [0.3, 0.0, 0.0]]);
        let keys = KeyPoints {
            coords: vec![[0.0; 3], [100.0, 0.0, 0.0]],
            source_indices: vec![0, 3],
        };
        let ps = kmeans_group(&pc, &keys, 2, 3).unwrap();
        // Every cluster must end non-empty.
        assert!(ps.pre_dup_counts.iter().all(|&c| c > 0));
        let covered: usize = ps.pre_dup_counts.iter().sum();
        assert_eq!(covered, 4);
    }

    #[test]
    fn every_grouping_emits_m_times_k_valid_indices() {
        let mut rng = Rng::new(5);
        let pc = random_cloud(&mut rng, 128);
        let (m, k) = (8, 16);
        for g in [
            Grouping::Ball,
            Grouping::Knn,
            Grouping::Kmeans,
            Grouping::Fpc,
        ] {
            let ps = build_patches(&pc, m, k, g, 0.4, 10).unwrap();
            assert_eq!(ps.assign.len(), m * k, "{g:?}");
            assert!(ps.assign.iter().all(|&i| i < 128), "{g:?}");
        }
    }

    #[test]
    fn gather_zero_offsets_for_self_patch() {
        let pc = cloud(&[[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]);
        let keys = keys_at(&pc, &[0]);
        let ps = ball_query_group(&pc, &keys, 2, 0.1).unwrap();
        let pt = gather_patches(&pc, &ps);
        assert!(pt.offsets.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gather_offsets_invariant_under_translation() {
        let mut rng = Rng::new(6);
        let pc = random_cloud(&mut rng, 64);
        let ps = build_patches(&pc, 4, 8, Grouping::Fpc, 0.2, 5).unwrap();
        let pt = gather_patches(&pc, &ps);

        let v = [2.0, -3.0, 0.5];
        let moved = PointCloud::new(
            pc.coords()
                .iter()
                .map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]])
                .collect(),
        )
        .unwrap();
        let moved_ps = build_patches(&moved, 4, 8, Grouping::Fpc, 0.2, 5).unwrap();
        let moved_pt = gather_patches(&moved, &moved_ps);
        assert_eq!(ps.assign, moved_ps.assign);
        for (a, b) in pt.offsets.iter().zip(&moved_pt.offsets) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_ball_offsets_within_radius() {
        let mut rng = Rng::new(7);
        let pc = random_cloud(&mut rng, 200);
        let r = 0.35;
        let ps = build_patches(&pc, 6, 12, Grouping::Ball, r, 1).unwrap();
        let pt = gather_patches(&pc, &ps);
        for chunk in pt.offsets.chunks(3) {
            let norm = (chunk[0].powi(2) + chunk[1].powi(2) + chunk[2].powi(2)).sqrt();
            assert!(norm <= r + 1e-12);
        }
    }

    #[test]
    fn gather_collects_extras_uncentered() {
        let pc = cloud(&[[0.0; 3], [0.1, 0.0, 0.0]])
            .with_extras(2, vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let keys = keys_at(&pc, &[0]);
        let ps = knn_group(&pc, &keys, 2).unwrap();
        let pt = gather_patches(&pc, &ps);
        let (w, data) = pt.extras.unwrap();
        assert_eq!(w, 2);
        assert_eq!(data, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
