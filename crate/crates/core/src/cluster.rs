//! Channel clustering and reorder plans.
//!
//! Each channel is summarised by a signature point, `(min, max)` for ordinary
//! activations or `(q_max, q_min, k_max, k_min)` for jointly reordered Q/K.
//! K-means groups the points and [`build_reorder`] lays the clusters out
//! contiguously, producing the permutation `perm` with `x_reordered[i] = x[perm[i]]`.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategy::GroupingStrategy;
use crate::tensor::validate_permutation;

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReorderPlan {
    pub g: usize,
    pub perm: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

impl ReorderPlan {
    /// Single cluster, no reordering: per-tensor grouping.
    pub fn identity(channels: usize) -> Self {
        Self {
            g: 1,
            perm: (0..channels).collect(),
            cluster_sizes: vec![channels],
            centroids: vec![Vec::new()],
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_identity_order(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn validate(&self) -> Result<()> {
        validate_permutation(&self.perm, self.perm.len())?;
        if self.cluster_sizes.len() != self.g || self.g == 0 {
            return Err(Error::InvalidPermutation(format!(
                "plan declares g={} but has {} cluster sizes",
                self.g,
                self.cluster_sizes.len()
            )));
        }
        if self.cluster_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidPermutation("empty cluster in plan".into()));
        }
        if self.cluster_sizes.iter().sum::<usize>() != self.perm.len() {
            return Err(Error::InvalidPermutation(
                "cluster sizes do not sum to the channel count".into(),
            ));
        }
        Ok(())
    }

    /// Position ranges (in reordered order) of each cluster.
    pub fn cluster_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.cluster_sizes
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect()
    }

    /// Cluster id of every reordered position.
    pub fn cluster_of_position(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for (i, &s) in self.cluster_sizes.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, s));
        }
        out
    }

    /// Original channel sets `S^1..S^g`.
    pub fn index_sets(&self) -> Vec<Vec<usize>> {
        self.cluster_ranges()
            .into_iter()
            .map(|r| self.perm[r].to_vec())
            .collect()
    }

    /// Block-diagonal concatenation: plan `i` acts on channels offset by the
    /// total length of the plans before it. Used to lay per-head plans side by side.
    pub fn concat(plans: &[ReorderPlan]) -> ReorderPlan {
        let mut out = ReorderPlan {
            g: 0,
            perm: Vec::new(),
            cluster_sizes: Vec::new(),
            centroids: Vec::new(),
        };
        for p in plans {
            let off = out.perm.len();
            out.perm.extend(p.perm.iter().map(|&i| i + off));
            out.cluster_sizes.extend_from_slice(&p.cluster_sizes);
            out.centroids.extend(p.centroids.iter().cloned());
            out.g += p.g;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every assignment and every centroid update, in order.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(points: &[Vec<f64>], g: usize) -> Result<usize> {
    let n = points.len();
    if g < 1 || g > n {
        return Err(Error::ClusterCount { g, n });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch("signature points differ in dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(0));
    }
    Ok(dim)
}

fn inertia(points: &[Vec<f64>], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

/// Index drawn with probability proportional to `weights`; `None` if all are zero.
fn weighted_pick(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> Option<usize> {
    if total <= 0.0 {
        return None;
    }
    let mut t = rng.random::<f64>() * total;
    let mut pick = None;
    for (i, &d) in weights.iter().enumerate() {
        if d > 0.0 {
            pick = Some(i);
            if t < d {
                break;
            }
            t -= d;
        }
    }
    pick
}

/// Greedy k-means++: each new centre is the best of `2 + ln g` candidates
/// drawn proportionally to squared distance, judged by the resulting potential.
fn kmeans_pp_init(points: &[Vec<f64>], g: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (g as f64).ln() as usize;
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < g {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let Some(cand) = weighted_pick(&d2, total, rng) else {
                break;
            };
            let next: Vec<f64> = d2.iter().zip(points).map(|(d, p)| d.min(sq_dist(p, &points[cand]))).collect();
            let pot: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.1) {
                best = Some((cand, pot, next));
            }
        }
        match best {
            Some((cand, _, next)) => {
                chosen.push(cand);
                d2 = next;
            }
            None => {
                // every remaining point coincides with a centre; take any unused index
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                let pick = free[rng.random_range(0..free.len())];
                chosen.push(pick);
                for (d, p) in d2.iter_mut().zip(points) {
                    *d = d.min(sq_dist(p, &points[pick]));
                }
            }
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Nearest-centroid assignment; a point only leaves its current cluster for a
/// strictly closer centroid.
fn assign_points(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &mut [usize]) {
    for (p, a) in points.iter().zip(assign.iter_mut()) {
        let mut best = *a;
        let mut best_d = sq_dist(p, &centroids[best]);
        for (j, c) in centroids.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        *a = best;
    }
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assign: &mut [usize]) {
    let g = centroids.len();
    loop {
        let mut counts = vec![0usize; g];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let (far, _) = points
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[assign[*i]] > 1)
            .map(|(i, p)| (i, sq_dist(p, &centroids[assign[i]])))
            .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        assign[far] = empty;
        centroids[empty] = points[far].clone();
    }
}

fn update_centroids(points: &[Vec<f64>], assign: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = points[0].len();
    let g = centroids.len();
    let mut sums = vec![vec![0.0; dim]; g];
    let mut counts = vec![0usize; g];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
        if n > 0 {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding. Stops when no assignment changes
/// or after `max_iter` updates; never returns an empty cluster.
pub fn kmeans(points: &[Vec<f64>], g: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    check_points(points, g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, g, &mut rng);
    let mut assign = vec![0usize; points.len()];
    assign_points(points, &centroids, &mut assign);
    repair_empty(points, &mut centroids, &mut assign);
    let mut trace = vec![inertia(points, &assign, &centroids)];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        update_centroids(points, &assign, &mut centroids);
        trace.push(inertia(points, &assign, &centroids));
        let mut next = assign.clone();
        assign_points(points, &centroids, &mut next);
        repair_empty(points, &mut centroids, &mut next);
        trace.push(inertia(points, &next, &centroids));
        let changed = next != assign;
        assign = next;
        if !changed {
            break;
        }
    }
    let inertia = *trace.last().unwrap();
    Ok(KMeansResult {
        assignments: assign,
        centroids,
        inertia,
        inertia_trace: trace,
        iterations,
    })
}

/// Best of `restarts` seeded runs (seeds `seed, seed+1, ...`).
pub fn kmeans_restarts(
    points: &[Vec<f64>],
    g: usize,
    seed: u64,
    max_iter: usize,
    restarts: usize,
) -> Result<KMeansResult> {
    let mut best = kmeans(points, g, seed, max_iter)?;
    for r in 1..restarts.max(1) as u64 {
        let cand = kmeans(points, g, seed.wrapping_add(r), max_iter)?;
        if cand.inertia < best.inertia {
            best = cand;
        }
    }
    Ok(best)
}

fn mean_point(points: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let dim = points.first().map_or(0, |p| p.len());
    let mut m = vec![0.0; dim];
    for &i in idx {
        for (s, v) in m.iter_mut().zip(&points[i]) {
            *s += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= idx.len() as f64);
    m
}

fn min_coord(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Lays out clusters contiguously. Clusters are ordered by the smallest
/// coordinate of their centroid (ties by lowest member index); members keep
/// ascending original order.
pub fn build_reorder(assignments: &[usize], signatures: &[Vec<f64>]) -> Result<ReorderPlan> {
    if assignments.len() != signatures.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} assignments for {} signatures",
            assignments.len(),
            signatures.len()
        )));
    }
    if assignments.is_empty() {
        return Err(Error::ClusterCount { g: 0, n: 0 });
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &a) in assignments.iter().enumerate() {
        groups.entry(a).or_default().push(i);
    }
    let mut clusters: Vec<(Vec<f64>, Vec<usize>)> = groups
        .into_values()
        .map(|idx| (mean_point(signatures, &idx), idx))
        .collect();
    clusters.sort_by(|a, b| {
        min_coord(&a.0)
            .total_cmp(&min_coord(&b.0))
            .then(a.1[0].cmp(&b.1[0]))
    });
    let plan = ReorderPlan {
        g: clusters.len(),
        perm: clusters.iter().flat_map(|c| c.1.iter().copied()).collect(),
        cluster_sizes: clusters.iter().map(|c| c.1.len()).collect(),
        centroids: clusters.into_iter().map(|c| c.0).collect(),
    };
    plan.validate()?;
    Ok(plan)
}

/// Equal-size groups after sorting channels by signature midpoint. The first
/// `n % g` groups take one extra channel.
pub fn plan_uniform_groups(signatures: &[Vec<f64>], g: usize) -> Result<ReorderPlan> {
    let n = signatures.len();
    if g < 1 || g > n {
        return Err(Error::ClusterCount { g, n });
    }
    let mid = |p: &Vec<f64>| p.iter().sum::<f64>() / p.len().max(1) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mid(&signatures[a]).total_cmp(&mid(&signatures[b])).then(a.cmp(&b)));
    let cluster_sizes: Vec<usize> = (0..g).map(|i| n / g + usize::from(i < n % g)).collect();
    let mut start = 0;
    let mut centroids = Vec::with_capacity(g);
    for &s in &cluster_sizes {
        centroids.push(mean_point(signatures, &order[start..start + s]));
        start += s;
    }
    let plan = ReorderPlan {
        g,
        perm: order,
        cluster_sizes,
        centroids,
    };
    plan.validate()?;
    Ok(plan)
}

/// K-means on the raw signature coordinates.
#[derive(Debug, Clone)]
pub struct KMeansGrouping {
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for KMeansGrouping {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            restarts: 1,
        }
    }
}

impl GroupingStrategy for KMeansGrouping {
    fn name(&self) -> &'static str {
        "kmeans"
    }

    fn plan(&self, signatures: &[Vec<f64>], g: usize, seed: u64) -> Result<ReorderPlan> {
        let km = kmeans_restarts(signatures, g, seed, self.max_iter, self.restarts)?;
        build_reorder(&km.assignments, signatures)
    }
}

/// Midpoint-sorted equal-size groups; the uniform-group comparison baseline.
#[derive(Debug, Clone, Copy)]
pub struct UniformGrouping;

impl GroupingStrategy for UniformGrouping {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn plan(&self, signatures: &[Vec<f64>], g: usize, _seed: u64) -> Result<ReorderPlan> {
        plan_uniform_groups(signatures, g)
    }
}

/// Ignores the requested count and always returns the single-cluster identity.
#[derive(Debug, Clone, Copy)]
pub struct PerTensorGrouping;

impl GroupingStrategy for PerTensorGrouping {
    fn name(&self) -> &'static str {
        "per-tensor"
    }

    fn plan(&self, signatures: &[Vec<f64>], _g: usize, _seed: u64) -> Result<ReorderPlan> {
        if signatures.is_empty() {
            return Err(Error::ClusterCount { g: 1, n: 0 });
        }
        Ok(ReorderPlan::identity(signatures.len()))
    }
}
