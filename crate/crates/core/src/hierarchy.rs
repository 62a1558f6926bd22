//! Pseudo-hierarchical semantics: K-means over tangent vectors, then bottom-up
//! merging of the K-means centroids, snapshotting the partition whenever the live
//! cluster count reaches one of the requested level sizes.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, ProductPoint};
use crate::scalar::{lit, Scalar};

/// Lloyd iterations used when building a hierarchy.
pub const DEFAULT_KMEANS_ITERS: usize = 20;

/// Output of [`kmeans`].
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans<T> {
    pub assignments: Vec<usize>,
    /// Row-major `k × dim`; each row is the mean of its assigned vectors.
    pub centroids: Vec<T>,
    pub sizes: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub objective_trace: Vec<T>,
}

/// One recorded merge: clusters `a` and `b` became `merged` at distance `distance`.
#[derive(Clone, Debug, PartialEq)]
pub struct Merge<T> {
    pub a: usize,
    pub b: usize,
    pub merged: usize,
    pub distance: T,
}

/// Partition of the initial sub-clusters at one level, produced by [`agglomerate`].
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPartition<T> {
    /// Level cluster id for each initial sub-cluster.
    pub subcluster_to_cluster: Vec<usize>,
    /// Row-major `num_clusters × dim` size-weighted prototypes.
    pub prototypes: Vec<T>,
    pub sizes: Vec<usize>,
}

/// Result of merging: one partition per requested level plus the merge trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Agglomeration<T> {
    pub levels: Vec<LevelPartition<T>>,
    pub merges: Vec<Merge<T>>,
}

/// One level of the hierarchy over items.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyLevel<T> {
    level: usize,
    num_clusters: usize,
    dim: usize,
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
    prototypes: Vec<T>,
    lifted: Vec<ProductPoint<T>>,
}

/// `L` nested levels, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy<T> {
    levels: Vec<HierarchyLevel<T>>,
    merges: Vec<Merge<T>>,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn row<T>(data: &[T], dim: usize, i: usize) -> &[T] {
    &data[i * dim..(i + 1) * dim]
}

/// K-means with k-means++ seeding and Lloyd iterations under Euclidean distance.
///
/// `vectors` is row-major `N × dim`. Empty clusters are refilled with the point
/// of the largest cluster that lies farthest from its centroid.
pub fn kmeans<T: Scalar>(
    vectors: &[T],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeans<T>> {
    if dim == 0 || !vectors.len().is_multiple_of(dim) {
        return Err(Error::invalid("kmeans: data length is not a multiple of dim"));
    }
    let n = vectors.len() / dim;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("kmeans: cannot form {k} clusters from {n} points")));
    }
    if iters == 0 {
        return Err(Error::invalid("kmeans: need at least one iteration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(vectors, dim, n, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut sizes = vec![0usize; k];
    let mut trace = Vec::with_capacity(iters);

    for _ in 0..iters {
        for (i, a) in assignments.iter_mut().enumerate() {
            *a = nearest_row(row(vectors, dim, i), &centroids, dim);
        }
        count_sizes(&assignments, &mut sizes);
        repair_empty(vectors, dim, &centroids, &mut assignments, &mut sizes);
        recompute_means(vectors, dim, &assignments, &sizes, &mut centroids);
        let obj = (0..n)
            .map(|i| sq_dist(row(vectors, dim, i), row(&centroids, dim, assignments[i])))
            .sum();
        trace.push(obj);
    }
    Ok(KMeans {
        assignments,
        centroids,
        sizes,
        objective_trace: trace,
    })
}

fn seed_plus_plus<T: Scalar>(
    vectors: &[T],
    dim: usize,
    n: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<T> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(vectors, dim, first));
    let mut best: Vec<f64> = (0..n)
        .map(|i| crate::scalar::to_f64(sq_dist(row(vectors, dim, i), row(vectors, dim, first))))
        .collect();
    for _ in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            // every point coincides with a chosen centroid
            rng.random_range(0..n)
        };
        let c = row(vectors, dim, pick).to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            let d = crate::scalar::to_f64(sq_dist(row(vectors, dim, i), &c));
            if d < *b {
                *b = d;
            }
        }
        centroids.extend(c);
    }
    centroids
}

fn nearest_row<T: Scalar>(v: &[T], centroids: &[T], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(v, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn count_sizes(assignments: &[usize], sizes: &mut [usize]) {
    sizes.iter_mut().for_each(|s| *s = 0);
    for &a in assignments {
        sizes[a] += 1;
    }
}

fn repair_empty<T: Scalar>(
    vectors: &[T],
    dim: usize,
    centroids: &[T],
    assignments: &mut [usize],
    sizes: &mut [usize],
) {
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..sizes.len())
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
            .expect("at least one cluster");
        let mut far = None;
        let mut far_d = T::neg_infinity();
        for (i, &a) in assignments.iter().enumerate() {
            if a == largest {
                let d = sq_dist(row(vectors, dim, i), row(centroids, dim, largest));
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
        }
        let far = far.expect("largest cluster is non-empty");
        assignments[far] = empty;
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
}

fn recompute_means<T: Scalar>(
    vectors: &[T],
    dim: usize,
    assignments: &[usize],
    sizes: &[usize],
    centroids: &mut [T],
) {
    centroids.iter_mut().for_each(|c| *c = T::zero());
    for (i, &a) in assignments.iter().enumerate() {
        for (c, &x) in centroids[a * dim..(a + 1) * dim]
            .iter_mut()
            .zip(row(vectors, dim, i))
        {
            *c += x;
        }
    }
    for (c, &s) in centroids.chunks_exact_mut(dim).zip(sizes) {
        let inv = T::from_usize(s).expect("size fits scalar").recip();
        c.iter_mut().for_each(|x| *x *= inv);
    }
}

/// Heap entry ordered by (distance, a, b) so ties resolve to the
/// lexicographically smallest id pair.
struct Candidate<T> {
    distance: T,
    a: usize,
    b: usize,
}

impl<T: Scalar> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for Candidate<T> {}

impl<T: Scalar> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for Candidate<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .partial_cmp(&other.distance)
            .unwrap_or(Ordering::Equal)
            .then(self.a.cmp(&other.a))
            .then(self.b.cmp(&other.b))
    }
}

/// Bottom-up merging of `centroids` (row-major, `sizes.len()` rows) until the
/// smallest target count is reached. `targets` must be strictly descending with
/// `targets[0] <= sizes.len()` and the last entry `>= 1`.
pub fn agglomerate<T: Scalar>(
    centroids: &[T],
    sizes: &[usize],
    targets: &[usize],
) -> Result<Agglomeration<T>> {
    let k0 = sizes.len();
    if k0 == 0 || !centroids.len().is_multiple_of(k0) {
        return Err(Error::invalid("agglomerate: centroid matrix does not match sizes"));
    }
    check_targets(targets, k0)?;
    let dim = centroids.len() / k0;

    let mut protos: Vec<Vec<T>> = centroids.chunks_exact(dim).map(<[T]>::to_vec).collect();
    let mut weight: Vec<usize> = sizes.to_vec();
    let mut alive: Vec<bool> = vec![true; k0];
    let mut subclusters: Vec<Vec<usize>> = (0..k0).map(|i| vec![i]).collect();
    let mut live = k0;

    let mut heap = BinaryHeap::new();
    for a in 0..k0 {
        for b in a + 1..k0 {
            heap.push(Reverse(Candidate {
                distance: sq_dist(&protos[a], &protos[b]).sqrt(),
                a,
                b,
            }));
        }
    }

    let mut levels = Vec::with_capacity(targets.len());
    let mut merges = Vec::with_capacity(k0 - targets[targets.len() - 1]);
    let mut next_target = 0;
    let snapshot = |alive: &[bool], protos: &[Vec<T>], weight: &[usize], subs: &[Vec<usize>]| {
        let mut map = vec![usize::MAX; k0];
        let mut prototypes = Vec::new();
        let mut level_sizes = Vec::new();
        for (cid, id) in (0..alive.len()).filter(|&id| alive[id]).enumerate() {
            for &s in &subs[id] {
                map[s] = cid;
            }
            prototypes.extend_from_slice(&protos[id]);
            level_sizes.push(weight[id]);
        }
        LevelPartition {
            subcluster_to_cluster: map,
            prototypes,
            sizes: level_sizes,
        }
    };

    while next_target < targets.len() && live == targets[next_target] {
        levels.push(snapshot(&alive, &protos, &weight, &subclusters));
        next_target += 1;
    }
    while next_target < targets.len() {
        let Reverse(c) = heap
            .pop()
            .ok_or_else(|| Error::Consistency("agglomerate: ran out of merge candidates".into()))?;
        if !alive[c.a] || !alive[c.b] {
            continue;
        }
        let id = protos.len();
        let (wa, wb) = (weight[c.a], weight[c.b]);
        let fa = T::from_usize(wa).expect("size fits scalar");
        let fb = T::from_usize(wb).expect("size fits scalar");
        let merged: Vec<T> = protos[c.a]
            .iter()
            .zip(&protos[c.b])
            .map(|(&x, &y)| (fa * x + fb * y) / (fa + fb))
            .collect();
        let mut subs = std::mem::take(&mut subclusters[c.a]);
        subs.append(&mut std::mem::take(&mut subclusters[c.b]));
        subs.sort_unstable();
        alive[c.a] = false;
        alive[c.b] = false;
        for other in 0..id {
            if alive[other] {
                heap.push(Reverse(Candidate {
                    distance: sq_dist(&protos[other], &merged).sqrt(),
                    a: other,
                    b: id,
                }));
            }
        }
        protos.push(merged);
        weight.push(wa + wb);
        alive.push(true);
        subclusters.push(subs);
        merges.push(Merge {
            a: c.a,
            b: c.b,
            merged: id,
            distance: c.distance,
        });
        live -= 1;
        while next_target < targets.len() && live == targets[next_target] {
            levels.push(snapshot(&alive, &protos, &weight, &subclusters));
            next_target += 1;
        }
    }
    Ok(Agglomeration { levels, merges })
}

fn check_targets(targets: &[usize], k0: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::invalid("hierarchy needs at least one level"));
    }
    if targets.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid(format!(
            "hierarchy level counts must be strictly descending, got {targets:?}"
        )));
    }
    if targets[targets.len() - 1] == 0 {
        return Err(Error::invalid("hierarchy level counts must be at least 1"));
    }
    if targets[0] > k0 {
        return Err(Error::invalid(format!(
            "finest level has {} clusters but only {k0} sub-clusters exist",
            targets[0]
        )));
    }
    Ok(())
}

/// Initial K-means cluster count: `4·N₁` capped at `N/2`, but never below `N₁`.
pub fn initial_cluster_count(num_items: usize, finest: usize) -> usize {
    (4 * finest).min(num_items / 2).max(finest)
}

impl<T: Scalar> HierarchyLevel<T> {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    /// Cluster id of every item.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Item ids of each cluster, ascending.
    pub fn members(&self, cluster: usize) -> &[usize] {
        &self.members[cluster]
    }

    /// Tangent-space prototype of a cluster.
    pub fn prototype(&self, cluster: usize) -> &[T] {
        &self.prototypes[cluster * self.dim..(cluster + 1) * self.dim]
    }

    pub fn prototypes(&self) -> &[T] {
        &self.prototypes
    }

    /// Prototypes on the product manifold; empty until [`lift_prototypes`] runs.
    pub fn lifted_prototypes(&self) -> &[ProductPoint<T>] {
        &self.lifted
    }

    pub fn set_lifted_prototypes(&mut self, lifted: Vec<ProductPoint<T>>) {
        self.lifted = lifted;
    }
}

impl<T: Scalar> Hierarchy<T> {
    /// Builds the hierarchy over row-major tangent vectors (`N × dim`).
    pub fn build(vectors: &[T], dim: usize, targets: &[usize], iters: usize, seed: u64) -> Result<Self> {
        if dim == 0 || !vectors.len().is_multiple_of(dim) {
            return Err(Error::invalid("hierarchy: data length is not a multiple of dim"));
        }
        let n = vectors.len() / dim;
        let finest = *targets
            .first()
            .ok_or_else(|| Error::invalid("hierarchy needs at least one level"))?;
        if finest > n {
            return Err(Error::invalid(format!(
                "finest hierarchy level has {finest} clusters but only {n} items"
            )));
        }
        let k0 = initial_cluster_count(n, finest);
        let km = kmeans(vectors, dim, k0, iters, seed)?;
        Self::from_kmeans(vectors, dim, &km, targets)
    }

    /// Builds the hierarchy from an existing K-means result.
    pub fn from_kmeans(vectors: &[T], dim: usize, km: &KMeans<T>, targets: &[usize]) -> Result<Self> {
        let agg = agglomerate(&km.centroids, &km.sizes, targets)?;
        let n = vectors.len() / dim;
        let levels = agg
            .levels
            .into_iter()
            .enumerate()
            .map(|(l, part)| {
                let num_clusters = part.sizes.len();
                let assignment: Vec<usize> = km
                    .assignments
                    .iter()
                    .map(|&s| part.subcluster_to_cluster[s])
                    .collect();
                let mut members = vec![Vec::new(); num_clusters];
                for (i, &c) in assignment.iter().enumerate() {
                    members[c].push(i);
                }
                debug_assert_eq!(assignment.len(), n);
                HierarchyLevel {
                    level: l,
                    num_clusters,
                    dim,
                    assignment,
                    members,
                    prototypes: part.prototypes,
                    lifted: Vec::new(),
                }
            })
            .collect();
        Ok(Hierarchy {
            levels,
            merges: agg.merges,
        })
    }

    pub fn levels(&self) -> &[HierarchyLevel<T>] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &HierarchyLevel<T> {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_items(&self) -> usize {
        self.levels.first().map_or(0, |l| l.assignment.len())
    }

    pub fn merges(&self) -> &[Merge<T>] {
        &self.merges
    }

    /// Lifts every level's prototypes onto the product manifold.
    pub fn lift_all(&mut self, curvatures: &[T], clip_norm: T) -> Result<()> {
        for level in &mut self.levels {
            let lifted = lift_prototypes(level, curvatures, clip_norm)?;
            level.lifted = lifted;
        }
        Ok(())
    }

    /// Uniform draw from the other members of `item`'s level-`l` cluster; a
    /// singleton cluster returns `item` itself.
    pub fn sample_instance_positive<R: Rng + ?Sized>(&self, item: usize, l: usize, rng: &mut R) -> usize {
        let level = &self.levels[l];
        let members = &level.members[level.assignment[item]];
        draw_other(members.iter().copied(), members.len(), item, rng)
    }

    /// Like [`Hierarchy::sample_instance_positive`], restricted to `pool` (a list
    /// of item ids). Returns the position in `pool` of the drawn item, or `None`
    /// when no other pool member shares the cluster.
    pub fn sample_positive_in_pool<R: Rng + ?Sized>(
        &self,
        pool: &[usize],
        anchor: usize,
        l: usize,
        rng: &mut R,
    ) -> Option<usize> {
        let level = &self.levels[l];
        let target = level.assignment[pool[anchor]];
        let candidates: Vec<usize> = (0..pool.len())
            .filter(|&j| j != anchor && level.assignment[pool[j]] == target)
            .collect();
        if candidates.is_empty() {
            None
        } else {
            Some(candidates[rng.random_range(0..candidates.len())])
        }
    }
}

fn draw_other<R: Rng + ?Sized>(
    members: impl Iterator<Item = usize> + Clone,
    len: usize,
    item: usize,
    rng: &mut R,
) -> usize {
    if len <= 1 {
        return item;
    }
    let pick = rng.random_range(0..len - 1);
    members.filter(|&m| m != item).nth(pick).unwrap_or(item)
}

/// Maps tangent prototypes onto the product manifold: slice into `M` segments,
/// project at each origin, clip, exponential map.
pub fn lift_prototypes<T: Scalar>(
    level: &HierarchyLevel<T>,
    curvatures: &[T],
    clip_norm: T,
) -> Result<Vec<ProductPoint<T>>> {
    let m = curvatures.len();
    if m == 0 || !level.dim.is_multiple_of(m) || level.dim / m < 2 {
        return Err(Error::invalid(format!(
            "prototype dimension {} does not split into {m} subspaces",
            level.dim
        )));
    }
    (0..level.num_clusters)
        .map(|c| lift_tangent(level.prototype(c), curvatures, clip_norm))
        .collect()
}

/// Lifts one concatenated tangent vector (`M·(d+1)` coordinates) to a product point.
pub fn lift_tangent<T: Scalar>(tangent: &[T], curvatures: &[T], clip_norm: T) -> Result<ProductPoint<T>> {
    let m = curvatures.len();
    if m == 0 || !tangent.len().is_multiple_of(m) {
        return Err(Error::invalid("tangent vector does not split into subspaces"));
    }
    let w = tangent.len() / m;
    let parts = tangent
        .chunks_exact(w)
        .zip(curvatures)
        .map(|(seg, &theta)| {
            let o = geometry::origin(w - 1, theta)?;
            let v = geometry::tangent_project(&o, seg)?;
            let v = geometry::clip_tangent(&v, clip_norm);
            geometry::exp_map(&o, &v)
        })
        .collect::<Result<Vec<_>>>()?;
    ProductPoint::new(parts)
}

/// Recomputes a level's prototypes as plain means of member vectors.
pub fn recompute_prototypes<T: Scalar>(level: &HierarchyLevel<T>, vectors: &[T]) -> Vec<T> {
    let dim = level.dim;
    let mut out = vec![T::zero(); level.num_clusters * dim];
    for (c, members) in level.members.iter().enumerate() {
        let acc = &mut out[c * dim..(c + 1) * dim];
        for &i in members {
            for (a, &x) in acc.iter_mut().zip(row(vectors, dim, i)) {
                *a += x;
            }
        }
        let inv = lit::<T>(members.len() as f64).recip();
        acc.iter_mut().for_each(|x| *x *= inv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64, per: usize, centers: &[[f64; 2]], std: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, std).unwrap();
        let mut out = Vec::new();
        for c in centers {
            for _ in 0..per {
                out.push(c[0] + noise.sample(&mut rng));
                out.push(c[1] + noise.sample(&mut rng));
            }
        }
        out
    }

    fn wcss(data: &[f64], dim: usize, labels: &[usize], k: usize) -> f64 {
        let n = labels.len();
        let mut total = 0.0;
        for c in 0..k {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for &i in &idx {
                for j in 0..dim {
                    mean[j] += data[i * dim + j] / idx.len() as f64;
                }
            }
            for &i in &idx {
                total += sq_dist(&data[i * dim..(i + 1) * dim], &mean);
            }
        }
        total
    }

    #[test]
    fn kmeans_with_k_equal_n_gives_singletons() {
        let data = blobs(1, 5, &[[0.0, 0.0], [3.0, 3.0]], 1.0);
        let km = kmeans(&data, 2, 10, 5, 7).unwrap();
        assert!(km.sizes.iter().all(|&s| s == 1));
        assert_eq!(*km.objective_trace.last().unwrap(), 0.0);
    }

    #[test]
    fn kmeans_separates_two_blobs_optimally() {
        let data = blobs(2, 7, &[[0.0, 0.0], [10.0, 10.0]], 0.5);
        let n = data.len() / 2;
        let km = kmeans(&data, 2, 2, 20, 3).unwrap();
        // brute force over all 2-partitions
        let mut best = f64::INFINITY;
        let mut best_labels = vec![];
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let w = wcss(&data, 2, &labels, 2);
            if w < best {
                best = w;
                best_labels = labels;
            }
        }
        let same = |l: &[usize]| (0..n).map(|i| l[i] == l[0]).collect::<Vec<_>>();
        assert_eq!(same(&km.assignments), same(&best_labels));
        assert!((wcss(&data, 2, &km.assignments, 2) - best).abs() < 1e-9);
        // blob purity
        assert!(km.assignments[..7].iter().all(|&a| a == km.assignments[0]));
        assert!(km.assignments[7..].iter().all(|&a| a == km.assignments[7]));
    }

    #[test]
    fn kmeans_objective_never_increases() {
        let data = blobs(4, 40, &[[0.0, 0.0], [2.0, 1.0], [-1.0, 3.0], [4.0, -2.0]], 1.2);
        let km = kmeans(&data, 2, 9, 20, 5).unwrap();
        for w in km.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", km.objective_trace);
        }
        assert!(km.sizes.iter().all(|&s| s > 0));
    }

    #[test]
    fn kmeans_is_deterministic_and_validates() {
        let data = blobs(6, 30, &[[0.0, 0.0], [5.0, 5.0]], 1.0);
        assert_eq!(kmeans(&data, 2, 4, 10, 9).unwrap(), kmeans(&data, 2, 4, 10, 9).unwrap());
        assert!(kmeans(&data, 2, 61, 10, 9).is_err());
        assert!(kmeans(&data, 2, 3, 0, 9).is_err());
    }

    #[test]
    fn linkage_merges_nearest_pairs() {
        let centroids = [0.0, 0.1, 10.0, 10.1];
        let agg = agglomerate(&centroids, &[1, 1, 1, 1], &[2]).unwrap();
        let map = &agg.levels[0].subcluster_to_cluster;
        assert_eq!(map[0], map[1]);
        assert_eq!(map[2], map[3]);
        assert_ne!(map[0], map[2]);

        // brute force: the 2-partition reached by nearest-pair merging is the one
        // whose within-group spans are smallest
        let pts = [0.0f64, 0.1, 10.0, 10.1];
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..15 {
            let groups = [0usize, 1].map(|g| {
                (0..4).filter(|&i| ((mask >> i) & 1) as usize == g).map(|i| pts[i]).collect::<Vec<_>>()
            });
            let span: f64 = groups
                .iter()
                .map(|g| g.iter().cloned().fold(f64::MIN, f64::max) - g.iter().cloned().fold(f64::MAX, f64::min))
                .sum();
            if span < best.0 {
                best = (span, mask);
            }
        }
        let bf: Vec<u32> = (0..4).map(|i| (best.1 >> i) & 1).collect();
        assert_eq!(bf[0], bf[1]);
        assert_eq!(bf[2], bf[3]);
    }

    #[test]
    fn identity_level_when_target_is_k0() {
        let centroids = [0.0, 1.0, 5.0];
        let agg = agglomerate(&centroids, &[2, 2, 2], &[3]).unwrap();
        assert_eq!(agg.levels[0].subcluster_to_cluster, vec![0, 1, 2]);
        assert!(agg.merges.is_empty());
    }

    #[test]
    fn merged_prototype_is_size_weighted() {
        let centroids = [1.0f64, 2.0, 5.0, -2.0, 100.0, 100.0];
        let agg = agglomerate(&centroids, &[3, 1, 1], &[2]).unwrap();
        let level = &agg.levels[0];
        let merged = level.subcluster_to_cluster[0];
        assert_eq!(level.subcluster_to_cluster[1], merged);
        let p = &level.prototypes[merged * 2..merged * 2 + 2];
        assert!((p[0] - (3.0 * 1.0 + 5.0) / 4.0).abs() < 1e-15);
        assert!((p[1] - (3.0 * 2.0 - 2.0) / 4.0).abs() < 1e-15);
        assert_eq!(level.sizes[merged], 4);
    }

    #[test]
    fn equal_distances_merge_smallest_ids_first() {
        let centroids = [0.0, 1.0, 2.0, 3.0];
        let agg = agglomerate(&centroids, &[1, 1, 1, 1], &[3]).unwrap();
        assert_eq!((agg.merges[0].a, agg.merges[0].b), (0, 1));
    }

    #[test]
    fn rejects_bad_targets() {
        let c = [0.0, 1.0, 2.0];
        assert!(agglomerate(&c, &[1, 1, 1], &[2, 2]).is_err());
        assert!(agglomerate(&c, &[1, 1, 1], &[1, 2]).is_err());
        assert!(agglomerate(&c, &[1, 1, 1], &[4]).is_err());
        assert!(agglomerate(&c, &[1, 1, 1], &[2, 0]).is_err());
    }

    #[test]
    fn initial_count_rule() {
        assert_eq!(initial_cluster_count(2000, 200), 800);
        assert_eq!(initial_cluster_count(1000, 200), 500);
        assert_eq!(initial_cluster_count(300, 200), 200);
    }

    fn small_hierarchy() -> (Vec<f64>, Hierarchy<f64>) {
        let centers: Vec<[f64; 2]> = (0..6).map(|i| [i as f64 * 4.0, (i % 2) as f64 * 4.0]).collect();
        let mut data2 = blobs(8, 20, &centers, 0.7);
        // pad to 2 subspaces of width 3 with zero time coordinates
        let mut data = Vec::new();
        for p in data2.chunks_exact_mut(2) {
            data.extend_from_slice(&[0.0, p[0] * 0.1, p[1] * 0.1, 0.0, p[1] * 0.05, -p[0] * 0.05]);
        }
        let h = Hierarchy::build(&data, 6, &[12, 6, 3], 20, 1).unwrap();
        (data, h)
    }

    #[test]
    fn levels_are_nested_and_prototypes_are_means() {
        let (data, h) = small_hierarchy();
        assert_eq!(h.num_levels(), 3);
        for (l, level) in h.levels().iter().enumerate() {
            assert_eq!(level.num_clusters(), [12, 6, 3][l]);
            assert!((0..level.num_clusters()).all(|c| !level.members(c).is_empty()));
            let recomputed = recompute_prototypes(level, &data);
            for (a, b) in recomputed.iter().zip(level.prototypes()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        for fine in 0..h.num_levels() {
            for coarse in fine + 1..h.num_levels() {
                let (f, c) = (h.level(fine), h.level(coarse));
                for cluster in 0..f.num_clusters() {
                    let parents: std::collections::BTreeSet<usize> =
                        f.members(cluster).iter().map(|&i| c.assignment()[i]).collect();
                    assert_eq!(parents.len(), 1);
                }
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let (data, h) = small_hierarchy();
        let again = Hierarchy::build(&data, 6, &[12, 6, 3], 20, 1).unwrap();
        assert_eq!(h, again);
    }

    #[test]
    fn lifting_prototypes() {
        let (_, mut h) = small_hierarchy();
        h.lift_all(&[1.0, 0.5], 1.5).unwrap();
        for level in h.levels() {
            assert_eq!(level.lifted_prototypes().len(), level.num_clusters());
            assert!(level.lifted_prototypes().iter().all(ProductPoint::is_on_manifold));
        }
        let zero = lift_tangent(&[0.0; 6], &[1.0, 0.5], 1.5).unwrap();
        assert_eq!(zero.parts()[0], geometry::origin(2, 1.0).unwrap());
        assert_eq!(zero.parts()[1], geometry::origin(2, 0.5).unwrap());
        assert!(lift_prototypes(h.level(0), &[1.0, 1.0, 1.0, 1.0], 1.5).is_err());
    }

    #[test]
    fn instance_positive_sampling() {
        let (_, h) = small_hierarchy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let level = h.level(0);
        for item in 0..h.num_items() {
            let p = h.sample_instance_positive(item, 0, &mut rng);
            let members = level.members(level.assignment()[item]);
            if members.len() == 1 {
                assert_eq!(p, item);
            } else {
                assert_ne!(p, item);
                assert_eq!(level.assignment()[p], level.assignment()[item]);
            }
        }
    }

    #[test]
    fn singleton_and_pair_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw_other([4usize].into_iter(), 1, 4, &mut rng), 4);
        for _ in 0..20 {
            assert_eq!(draw_other([2usize, 9].into_iter(), 2, 2, &mut rng), 9);
        }
    }

    #[test]
    fn sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let members = [3usize, 5, 8, 13];
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let p = draw_other(members.iter().copied(), 4, 5, &mut rng);
            counts[members.iter().position(|&m| m == p).unwrap()] += 1;
        }
        assert_eq!(counts[1], 0);
        let expected = draws as f64 / 3.0;
        let sigma = (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        let mut chi2 = 0.0;
        for &c in [counts[0], counts[2], counts[3]].iter() {
            assert!((c as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 2 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 13.82, "chi2 = {chi2}");
    }

    #[test]
    fn pool_sampling() {
        let (_, h) = small_hierarchy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let level = h.level(2);
        let a = 0;
        let same: Vec<usize> = (1..h.num_items())
            .filter(|&i| level.assignment()[i] == level.assignment()[a])
            .collect();
        let other = (0..h.num_items())
            .find(|&i| level.assignment()[i] != level.assignment()[a])
            .unwrap();
        let pool = vec![a, other, same[0]];
        assert_eq!(h.sample_positive_in_pool(&pool, 0, 2, &mut rng), Some(2));
        assert_eq!(h.sample_positive_in_pool(&[a, other], 0, 2, &mut rng), None);
    }
}
