//! Density-peak clustering of bike positions into candidate stations.
//!
//! Each point gets a local density ρ (neighbours strictly closer than the
//! cutoff) and a delta distance δ (distance to the nearest point ranked
//! above it). Points are totally ordered by `(ρ descending, index
//! ascending)`, so "higher density" is always defined and the result is
//! deterministic. Centers are points with both ρ and δ above their
//! thresholds; every other point inherits the label of its nearest
//! higher-ranked neighbour.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::Metric;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("no points to cluster")]
    Empty,
    #[error("invalid cluster parameters: {0}")]
    InvalidParams(String),
    #[error("rho and delta lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    /// Cutoff distance `d_c` in km.
    pub cutoff_km: f64,
    /// `θ_ρ = ρ_max · rho_fraction`.
    pub rho_fraction: f64,
    /// `θ_δ = δ_max · delta_fraction`.
    pub delta_fraction: f64,
    /// Clusters with fewer members are discarded as outliers.
    pub min_station_size: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams { cutoff_km: 0.1, rho_fraction: 1.0 / 3.0, delta_fraction: 1.0 / 3.0, min_station_size: 5 }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: String| Err(ClusterError::InvalidParams(m));
        if !(self.cutoff_km > 0.0 && self.cutoff_km.is_finite()) {
            return bad(format!("cutoff_km must be positive, got {}", self.cutoff_km));
        }
        for (name, f) in [("rho_fraction", self.rho_fraction), ("delta_fraction", self.delta_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {f}"));
            }
        }
        if self.min_station_size == 0 {
            return bad("min_station_size must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityDelta {
    pub rho: Vec<u32>,
    pub delta: Vec<f64>,
    /// Nearest higher-ranked point; `None` only for the top-ranked point.
    pub nearest_higher: Vec<Option<usize>>,
}

/// `true` when point `a` ranks above point `b`.
#[inline]
pub fn ranks_above(rho: &[u32], a: usize, b: usize) -> bool {
    rho[a] > rho[b] || (rho[a] == rho[b] && a < b)
}

/// Indices sorted from highest to lowest rank.
pub fn rank_order(rho: &[u32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| rho[b].cmp(&rho[a]).then(a.cmp(&b)));
    order
}

// Absolute slack on sweep-key gaps, covering rounding in key differences.
fn key_slack(key: f64) -> f64 {
    1e-9 * (1.0 + key.abs())
}

/// Computes ρ, δ and the nearest higher-ranked neighbour of every point.
///
/// Points are swept in `metric.sweep_key` order so that pairs whose key gap
/// already exceeds the range of interest are never measured. The exact
/// distance still decides every comparison, so results equal the O(n²)
/// definition.
pub fn compute_density_delta<P, M: Metric<P>>(
    points: &[P],
    cutoff_km: f64,
    metric: &M,
) -> Result<DensityDelta, ClusterError> {
    let n = points.len();
    if n == 0 {
        return Err(ClusterError::Empty);
    }
    let keys: Vec<f64> = points.iter().map(|p| metric.sweep_key(p)).collect();
    let mut by_key: Vec<usize> = (0..n).collect();
    by_key.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));

    let mut rho = vec![0u32; n];
    for (s, &i) in by_key.iter().enumerate() {
        for &j in &by_key[s + 1..] {
            if keys[j] - keys[i] > cutoff_km + key_slack(keys[i]) {
                break;
            }
            if metric.distance(&points[i], &points[j]) < cutoff_km {
                rho[i] += 1;
                rho[j] += 1;
            }
        }
    }

    let order = rank_order(&rho);
    let mut delta = vec![0.0; n];
    let mut nearest_higher = vec![None; n];

    let head = order[0];
    delta[head] = points.iter().map(|p| metric.distance(&points[head], p)).fold(0.0, f64::max);

    let mut slot = vec![0usize; n];
    for (s, &i) in by_key.iter().enumerate() {
        slot[i] = s;
    }
    for &i in &order[1..] {
        let s = slot[i];
        let mut best = f64::INFINITY;
        let mut best_j = usize::MAX;
        let consider = |j: usize, best: &mut f64, best_j: &mut usize| {
            if !ranks_above(&rho, j, i) {
                return;
            }
            let d = metric.distance(&points[i], &points[j]);
            let better = match d.total_cmp(best) {
                Ordering::Less => true,
                Ordering::Equal => ranks_above(&rho, j, *best_j),
                Ordering::Greater => false,
            };
            if better {
                *best = d;
                *best_j = j;
            }
        };
        for &j in &by_key[s + 1..] {
            if keys[j] - keys[i] > best + key_slack(keys[i]) {
                break;
            }
            consider(j, &mut best, &mut best_j);
        }
        for &j in by_key[..s].iter().rev() {
            if keys[i] - keys[j] > best + key_slack(keys[i]) {
                break;
            }
            consider(j, &mut best, &mut best_j);
        }
        delta[i] = best;
        nearest_higher[i] = Some(best_j);
    }

    Ok(DensityDelta { rho, delta, nearest_higher })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub centers: Vec<usize>,
    pub outliers: Vec<usize>,
    pub theta_rho: f64,
    pub theta_delta: f64,
}

/// Reads centers and outliers off the decision graph.
///
/// Centers: `ρ > θ_ρ` and `δ > θ_δ`. Outliers: `ρ ≤ θ_ρ` and `δ > θ_δ`.
/// An empty center list is a valid result.
pub fn detect_centers_outliers(rho: &[u32], delta: &[f64], params: &ClusterParams) -> Result<Decision, ClusterError> {
    if rho.len() != delta.len() {
        return Err(ClusterError::LengthMismatch(rho.len(), delta.len()));
    }
    let rho_max = rho.iter().copied().max().unwrap_or(0) as f64;
    let delta_max = delta.iter().copied().fold(0.0, f64::max);
    let theta_rho = rho_max * params.rho_fraction;
    let theta_delta = delta_max * params.delta_fraction;
    let mut centers = Vec::new();
    let mut outliers = Vec::new();
    for (i, (&r, &d)) in rho.iter().zip(delta).enumerate() {
        if d > theta_delta {
            if r as f64 > theta_rho {
                centers.push(i);
            } else {
                outliers.push(i);
            }
        }
    }
    Ok(Decision { centers, outliers, theta_rho, theta_delta })
}

/// Result of clustering one temporal subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet<P> {
    pub points: Vec<P>,
    pub rho: Vec<u32>,
    pub delta: Vec<f64>,
    pub nearest_higher: Vec<Option<usize>>,
    /// Cluster id per point; `None` marks an outlier.
    #[serde(rename = "label")]
    pub labels: Vec<Option<usize>>,
    /// Center point index of each retained cluster; `centers[k]` heads cluster `k`.
    pub centers: Vec<usize>,
    /// Decision-graph outliers (low ρ, high δ).
    pub outliers: Vec<usize>,
    pub theta_rho: f64,
    pub theta_delta: f64,
    /// Set when no point qualified as a center. Coincident inputs are the
    /// exception: they form one cluster headed by the top-ranked point.
    pub no_centers: bool,
}

impl<P> ClusterSet<P> {
    pub fn cluster_count(&self) -> usize {
        self.centers.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.len()];
        for k in self.labels.iter().flatten() {
            sizes[*k] += 1;
        }
        sizes
    }

    pub fn outlier_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

/// Full density-peak clustering: density and delta, center detection,
/// label propagation down the nearest-higher links, then removal of
/// clusters smaller than `min_station_size`.
///
/// Outliers stay unlabelled, and so does every point whose nearest higher
/// neighbour is unlabelled.
pub fn cluster_drop_offs<P: Clone, M: Metric<P>>(
    points: &[P],
    params: &ClusterParams,
    metric: &M,
) -> Result<ClusterSet<P>, ClusterError> {
    params.validate()?;
    let dd = compute_density_delta(points, params.cutoff_km, metric)?;
    let mut decision = detect_centers_outliers(&dd.rho, &dd.delta, params)?;
    let n = points.len();
    // Every point coincides (δ ≡ 0, ρ > 0): one cluster headed by the top-ranked point.
    if decision.centers.is_empty() && n > 1 && dd.delta.iter().all(|&d| d == 0.0) {
        decision.centers.push(rank_order(&dd.rho)[0]);
    }

    let mut is_outlier = vec![false; n];
    for &i in &decision.outliers {
        is_outlier[i] = true;
    }
    let mut center_id = vec![None; n];
    for (k, &c) in decision.centers.iter().enumerate() {
        center_id[c] = Some(k);
    }

    let mut labels: Vec<Option<usize>> = vec![None; n];
    for i in rank_order(&dd.rho) {
        labels[i] = if center_id[i].is_some() {
            center_id[i]
        } else if is_outlier[i] {
            None
        } else {
            dd.nearest_higher[i].and_then(|j| labels[j])
        };
    }

    let mut sizes = vec![0usize; decision.centers.len()];
    for k in labels.iter().flatten() {
        sizes[*k] += 1;
    }
    let mut remap = vec![None; sizes.len()];
    let mut centers = Vec::new();
    for (k, &size) in sizes.iter().enumerate() {
        if size >= params.min_station_size {
            remap[k] = Some(centers.len());
            centers.push(decision.centers[k]);
        }
    }
    for l in labels.iter_mut() {
        *l = l.and_then(|k| remap[k]);
    }

    Ok(ClusterSet {
        points: points.to_vec(),
        rho: dd.rho,
        delta: dd.delta,
        nearest_higher: dd.nearest_higher,
        labels,
        centers,
        outliers: decision.outliers,
        theta_rho: decision.theta_rho,
        theta_delta: decision.theta_delta,
        no_centers: decision.centers.is_empty(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::Planar;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn line(xs: &[f64]) -> Vec<[f64; 2]> {
        xs.iter().map(|&x| [x, 0.0]).collect()
    }

    /// Textbook O(n²) density/delta with the same tie-break, no sweep.
    fn brute_density_delta(points: &[[f64; 2]], dc: f64) -> DensityDelta {
        let n = points.len();
        let d = |i: usize, j: usize| Planar.distance(&points[i], &points[j]);
        let rho: Vec<u32> = (0..n).map(|i| (0..n).filter(|&j| j != i && d(i, j) < dc).count() as u32).collect();
        let higher = |j: usize, i: usize| rho[j] > rho[i] || (rho[j] == rho[i] && j < i);
        let mut delta = vec![0.0; n];
        let mut nh = vec![None; n];
        for i in 0..n {
            let mut cands: Vec<usize> = (0..n).filter(|&j| higher(j, i)).collect();
            if cands.is_empty() {
                delta[i] = (0..n).map(|j| d(i, j)).fold(0.0, f64::max);
                continue;
            }
            // Nearest first; among equals the highest-ranked.
            cands.sort_by(|&a, &b| d(i, a).total_cmp(&d(i, b)).then_with(|| {
                if higher(a, b) { Ordering::Less } else { Ordering::Greater }
            }));
            delta[i] = d(i, cands[0]);
            nh[i] = Some(cands[0]);
        }
        DensityDelta { rho, delta, nearest_higher: nh }
    }

    #[test]
    fn three_collinear_points() {
        let pts = line(&[0.0, 1.0, 10.0]);
        let dd = compute_density_delta(&pts, 2.0, &Planar).unwrap();
        assert_eq!(dd.rho, vec![1, 1, 0]);
        assert_eq!(dd.delta, vec![10.0, 1.0, 9.0]);
        assert_eq!(dd.nearest_higher, vec![None, Some(0), Some(1)]);
        assert_eq!(dd, brute_density_delta(&pts, 2.0));
    }

    #[test]
    fn coincident_points() {
        let pts = vec![[3.0, 3.0]; 6];
        let dd = compute_density_delta(&pts, 1.0, &Planar).unwrap();
        assert!(dd.rho.iter().all(|&r| r == 5));
        assert_eq!(dd.delta[0], 0.0);
        assert!(dd.nearest_higher[1..].iter().all(|&j| j == Some(0)));
    }

    #[test]
    fn coincident_points_form_one_cluster() {
        let pts = vec![[3.0, 3.0]; 20];
        let set = cluster_drop_offs(&pts, &ClusterParams { cutoff_km: 1.0, ..Default::default() }, &Planar).unwrap();
        assert_eq!(set.cluster_sizes(), vec![20]);
        assert_eq!(set.centers, vec![0]);
        assert!(!set.no_centers);
        let few = cluster_drop_offs(&pts[..4], &ClusterParams { cutoff_km: 1.0, ..Default::default() }, &Planar).unwrap();
        assert_eq!(few.cluster_count(), 0);
    }

    #[test]
    fn single_point_is_degenerate() {
        let dd = compute_density_delta(&[[1.0, 2.0]], 1.0, &Planar).unwrap();
        assert_eq!(dd.rho, vec![0]);
        assert_eq!(dd.delta, vec![0.0]);
        assert_eq!(dd.nearest_higher, vec![None]);
        assert_eq!(compute_density_delta::<[f64; 2], _>(&[], 1.0, &Planar), Err(ClusterError::Empty));
    }

    #[test]
    fn threshold_arithmetic() {
        let d = detect_centers_outliers(&[9, 1, 1], &[5.0, 0.1, 4.9], &ClusterParams::default()).unwrap();
        assert_eq!(d.theta_rho, 3.0);
        assert!((d.theta_delta - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.centers, vec![0]);
        assert_eq!(d.outliers, vec![2]);
    }

    #[test]
    fn uniform_decision_graph_has_no_centers() {
        // Strict inequalities fail when the thresholds equal the maxima...
        let whole = ClusterParams { rho_fraction: 1.0, delta_fraction: 1.0, ..Default::default() };
        let d = detect_centers_outliers(&[4, 4, 4], &[2.0, 2.0, 2.0], &whole).unwrap();
        assert!(d.centers.is_empty());
        assert!(d.outliers.is_empty());
        // ...or when every density is zero.
        let d = detect_centers_outliers(&[0, 0, 0], &[2.0, 2.0, 2.0], &ClusterParams::default()).unwrap();
        assert!(d.centers.is_empty());
        // With 1/3 fractions a flat positive decision graph makes everything a center.
        let d = detect_centers_outliers(&[4, 4, 4], &[2.0, 2.0, 2.0], &ClusterParams::default()).unwrap();
        assert_eq!(d.centers, vec![0, 1, 2]);
        assert!(matches!(detect_centers_outliers(&[1], &[1.0, 2.0], &ClusterParams::default()), Err(ClusterError::LengthMismatch(1, 2))));
    }

    fn two_blobs(seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (k, c) in [[0.0, 0.0], [20.0, 5.0]].iter().enumerate() {
            for _ in 0..100 {
                pts.push([c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                truth.push(k);
            }
        }
        (pts, truth)
    }

    #[test]
    fn two_planted_blobs() {
        let (pts, truth) = two_blobs(11);
        let params = ClusterParams { cutoff_km: 0.5, ..ClusterParams::default() };
        let dd = compute_density_delta(&pts, params.cutoff_km, &Planar).unwrap();
        let decision = detect_centers_outliers(&dd.rho, &dd.delta, &params).unwrap();
        assert_eq!(decision.centers.len(), 2);
        let blobs: Vec<usize> = decision.centers.iter().map(|&c| truth[c]).collect();
        assert!(blobs.contains(&0) && blobs.contains(&1));

        let set = cluster_drop_offs(&pts, &params, &Planar).unwrap();
        assert_eq!(set.cluster_count(), 2);
        assert_eq!(set.outlier_count(), 0);
        let first = set.labels[0].unwrap();
        for (l, t) in set.labels.iter().zip(&truth) {
            assert_eq!(l.unwrap() == first, *t == 0);
        }
    }

    #[test]
    fn small_blob_is_dropped() {
        let pts = vec![[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [0.1, 0.1]];
        let set = cluster_drop_offs(&pts, &ClusterParams { cutoff_km: 0.5, ..Default::default() }, &Planar).unwrap();
        assert!(set.labels.iter().all(Option::is_none));
        assert_eq!(set.cluster_count(), 0);
        assert!(!set.no_centers);
    }

    #[test]
    fn no_centers_flag() {
        let set = cluster_drop_offs(&[[0.0, 0.0]], &ClusterParams::default(), &Planar).unwrap();
        assert!(set.no_centers);
        assert_eq!(set.labels, vec![None]);
    }

    #[test]
    fn params_are_validated() {
        let bad = [
            ClusterParams { cutoff_km: 0.0, ..Default::default() },
            ClusterParams { rho_fraction: 0.0, ..Default::default() },
            ClusterParams { delta_fraction: 1.5, ..Default::default() },
            ClusterParams { min_station_size: 0, ..Default::default() },
        ];
        for p in bad {
            assert!(cluster_drop_offs(&[[0.0, 0.0]], &p, &Planar).is_err());
        }
    }

    #[test]
    fn json_shape() {
        let set = cluster_drop_offs(&line(&[0.0, 0.1, 0.2, 0.3, 0.4]), &ClusterParams { cutoff_km: 0.25, ..Default::default() }, &Planar)
            .unwrap();
        let v: serde_json::Value = serde_json::to_value(&set).unwrap();
        for key in ["points", "rho", "delta", "label", "centers"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    fn clustered_points() -> impl Strategy<Value = Vec<[f64; 2]>> {
        (any::<u64>(), 1usize..120).prop_map(|(seed, n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centers: Vec<[f64; 2]> = (0..rng.random_range(1..5)).map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
            (0..n)
                .map(|_| {
                    let c = centers[rng.random_range(0..centers.len())];
                    // Coarse grid so ties in distance and density actually occur.
                    let q = |v: f64| (v * 4.0).round() / 4.0;
                    [q(c[0] + rng.random_range(-1.0..1.0)), q(c[1] + rng.random_range(-1.0..1.0))]
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn sweep_matches_brute_force(pts in clustered_points(), dc in 0.1..2.0f64) {
            prop_assert_eq!(compute_density_delta(&pts, dc, &Planar).unwrap(), brute_density_delta(&pts, dc));
        }

        #[test]
        fn rho_is_permutation_equivariant(pts in clustered_points(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..pts.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<[f64; 2]> = perm.iter().map(|&i| pts[i]).collect();
            let a = compute_density_delta(&pts, 0.7, &Planar).unwrap();
            let b = compute_density_delta(&shuffled, 0.7, &Planar).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(a.rho[i], b.rho[k]);
            }
        }

        #[test]
        fn zero_cutoff_zeroes_density(pts in clustered_points()) {
            let dd = compute_density_delta(&pts, 0.0, &Planar).unwrap();
            prop_assert!(dd.rho.iter().all(|&r| r == 0));
        }

        #[test]
        fn chains_reach_the_top(pts in clustered_points()) {
            let dd = compute_density_delta(&pts, 0.7, &Planar).unwrap();
            for start in 0..pts.len() {
                let mut i = start;
                let mut steps = 0;
                while let Some(j) = dd.nearest_higher[i] {
                    prop_assert!(ranks_above(&dd.rho, j, i));
                    i = j;
                    steps += 1;
                    prop_assert!(steps <= pts.len());
                }
            }
        }

        #[test]
        fn labels_follow_centers(pts in clustered_points()) {
            let params = ClusterParams { cutoff_km: 0.7, min_station_size: 3, ..Default::default() };
            let set = cluster_drop_offs(&pts, &params, &Planar).unwrap();
            for (k, &c) in set.centers.iter().enumerate() {
                prop_assert_eq!(set.labels[c], Some(k));
                prop_assert!(set.rho[c] as f64 > set.theta_rho && set.delta[c] > set.theta_delta);
            }
            for size in set.cluster_sizes() {
                prop_assert!(size >= 3);
            }
        }
    }
}
