//! Weighted digraph model of the stations in one period, and the
//! time-ordered sequence of such graphs for a region.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterSet;
use crate::geo::{haversine_distance, GeoPoint};
use crate::ggnn::codec::{CodecError, GridCodec, GridSpec};
use crate::ingest::{Granularity, PositionKind, PositionSet, TrajectoryRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("station with {0} bikes is below the smallest level (5)")]
    BelowMinimum(u32),
    #[error("graph has no rides; utility is undefined")]
    UndefinedUtility,
    #[error("vertex index {0} out of range")]
    NoSuchVertex(usize),
    #[error("cluster set covers {clusters} points but position set has {positions}")]
    ClusterMismatch { clusters: usize, positions: usize },
    #[error("snapshot has {got} entries for {want} clusters")]
    SnapshotMismatch { got: usize, want: usize },
    #[error("graph sequence needs at least 2 periods, got {0}")]
    InsufficientHistory(usize),
    #[error("invalid graph file: {0}")]
    Schema(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StationLevel {
    Micro,
    Small,
    Medium,
    Large,
}

impl fmt::Display for StationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StationLevel::Micro => "micro",
            StationLevel::Small => "small",
            StationLevel::Medium => "medium",
            StationLevel::Large => "large",
        })
    }
}

/// Station size class: micro `[5,10)`, small `[10,20)`, medium `[20,30)`,
/// large `[30,∞)` bikes.
pub fn classify_station_level(bikes: u32) -> Result<StationLevel, GraphError> {
    match bikes {
        0..=4 => Err(GraphError::BelowMinimum(bikes)),
        5..=9 => Ok(StationLevel::Micro),
        10..=19 => Ok(StationLevel::Small),
        20..=29 => Ok(StationLevel::Medium),
        _ => Ok(StationLevel::Large),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub id: String,
    pub location: GeoPoint,
    pub bikes: u32,
    /// `None` only for stations smaller than the micro level.
    pub level: Option<StationLevel>,
}

impl Station {
    pub fn new(id: impl Into<String>, location: GeoPoint, bikes: u32) -> Self {
        Station { id: id.into(), location, bikes, level: classify_station_level(bikes).ok() }
    }
}

/// `G = (V, E, D, W)`: stations, ride edges, pairwise distances (km) and
/// ride counts. `W` is dense and may hold self-loops on its diagonal;
/// `E` is derived as the off-diagonal pairs with positive weight.
#[derive(Debug, Clone, PartialEq)]
pub struct StationGraph {
    vertices: Vec<Station>,
    distances: Vec<f64>,
    weights: Vec<u32>,
}

impl Default for StationGraph {
    fn default() -> Self {
        Self::empty()
    }
}

impl StationGraph {
    pub fn empty() -> Self {
        StationGraph { vertices: Vec::new(), distances: Vec::new(), weights: Vec::new() }
    }

    /// A graph with stations only (no rides).
    pub fn from_vertices(vertices: Vec<Station>) -> Self {
        let n = vertices.len();
        Self::with_weights(vertices, vec![0; n * n])
    }

    /// `weights` is row-major `n×n`, `weights[i*n + j]` = rides from i to j.
    pub fn with_weights(vertices: Vec<Station>, weights: Vec<u32>) -> Self {
        let n = vertices.len();
        assert_eq!(weights.len(), n * n, "weight matrix must be n×n");
        let mut distances = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = haversine_distance(vertices[i].location, vertices[j].location);
                distances[i * n + j] = d;
                distances[j * n + i] = d;
            }
        }
        StationGraph { vertices, distances, weights }
    }

    pub fn vertices(&self) -> &[Station] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> u32 {
        self.weights[i * self.len() + j]
    }

    #[inline]
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.len() + j]
    }

    /// Directed edges `(i, j, w_ij)` with `i ≠ j` and `w_ij > 0`, row-major.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        let n = self.len();
        (0..n * n).filter_map(move |k| {
            let (i, j) = (k / n, k % n);
            let w = self.weights[k];
            (i != j && w > 0).then_some((i, j, w))
        })
    }

    /// `TP_G`: total rides in the graph, self-loops included.
    pub fn total_throughput(&self) -> u64 {
        self.weights.iter().map(|&w| w as u64).sum()
    }

    pub fn total_bikes(&self) -> u64 {
        self.vertices.iter().map(|v| v.bikes as u64).sum()
    }

    fn check(&self, i: usize) -> Result<(), GraphError> {
        if i < self.len() {
            Ok(())
        } else {
            Err(GraphError::NoSuchVertex(i))
        }
    }

    /// Keeps the listed vertices (in the given order) and the rides among them.
    pub fn subgraph(&self, keep: &[usize]) -> StationGraph {
        let m = keep.len();
        let n = self.len();
        let mut weights = vec![0; m * m];
        let mut distances = vec![0.0; m * m];
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                weights[a * m + b] = self.weights[i * n + j];
                distances[a * m + b] = self.distances[i * n + j];
            }
        }
        StationGraph { vertices: keep.iter().map(|&i| self.vertices[i].clone()).collect(), distances, weights }
    }
}

/// `P_i = Σ_j w_ij · d_ij · α` over rides departing station `i`.
pub fn station_revenue(g: &StationGraph, i: usize, alpha: f64) -> Result<f64, GraphError> {
    g.check(i)?;
    Ok((0..g.len()).map(|j| g.weight(i, j) as f64 * g.distance(i, j) * alpha).sum())
}

/// `TP_i`: rides leaving plus rides arriving at station `i`.
pub fn station_throughput(g: &StationGraph, i: usize) -> Result<u64, GraphError> {
    g.check(i)?;
    Ok((0..g.len()).map(|j| g.weight(i, j) as u64 + g.weight(j, i) as u64).sum())
}

/// `U_i = TP_i / (2·TP_G)`.
pub fn station_utility(g: &StationGraph, i: usize) -> Result<f64, GraphError> {
    let total = g.total_throughput();
    if total == 0 {
        return Err(GraphError::UndefinedUtility);
    }
    Ok(station_throughput(g, i)? as f64 / (2 * total) as f64)
}

/// How the inferior-station thresholds are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum InferiorThresholds {
    Fixed { theta_p: f64, theta_u: f64 },
    /// Both thresholds at this percentile (0–100) of the graph's own values.
    Percentile { percentile: f64 },
}

impl Default for InferiorThresholds {
    fn default() -> Self {
        InferiorThresholds::Percentile { percentile: 25.0 }
    }
}

impl InferiorThresholds {
    /// Resolves to `(θ_P, θ_U)` for a particular graph.
    pub fn resolve(&self, g: &StationGraph, alpha: f64) -> (f64, f64) {
        match *self {
            InferiorThresholds::Fixed { theta_p, theta_u } => (theta_p, theta_u),
            InferiorThresholds::Percentile { percentile } => {
                let (p, u) = revenue_and_utility(g, alpha);
                (percentile_of(&p, percentile), percentile_of(&u, percentile))
            }
        }
    }
}

/// Linear-interpolation percentile (`q` in 0–100); 0 for an empty slice.
pub fn percentile_of(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

// Utility is taken as 0 everywhere when the graph carries no rides.
fn revenue_and_utility(g: &StationGraph, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let total = g.total_throughput();
    let mut p = Vec::with_capacity(g.len());
    let mut u = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let mut rev = 0.0;
        let mut tp = 0u64;
        for j in 0..g.len() {
            rev += g.weight(i, j) as f64 * g.distance(i, j) * alpha;
            tp += g.weight(i, j) as u64 + g.weight(j, i) as u64;
        }
        p.push(rev);
        u.push(if total == 0 { 0.0 } else { tp as f64 / (2 * total) as f64 });
    }
    (p, u)
}

/// Drops every station with `P_i < θ_P` and `U_i < θ_U`, plus its edges.
///
/// Revenue and utility are evaluated once on the input graph; removing a
/// station does not trigger re-evaluation of the others.
pub fn remove_inferior(g: &StationGraph, theta_p: f64, theta_u: f64, alpha: f64) -> StationGraph {
    let (p, u) = revenue_and_utility(g, alpha);
    let keep: Vec<usize> = (0..g.len()).filter(|&i| !(p[i] < theta_p && u[i] < theta_u)).collect();
    g.subgraph(&keep)
}

#[derive(Debug, Clone, Default)]
pub struct GraphOptions {
    /// Clusters whose bike count falls below this are left out of the graph.
    pub min_station_size: u32,
    /// Bikes parked in each cluster at the start of the period, indexed by
    /// cluster label. With a snapshot, `n_i = snapshot + drop-offs − pickups`
    /// (floored at 0); without one, `n_i` is the drop-off count.
    pub snapshot: Option<Vec<u32>>,
}

/// Builds the station graph of one period from its clusters and rides.
///
/// Each retained cluster becomes a vertex at its center point. A ride adds
/// one to `w_ij` when its pickup lies in cluster `i` and its drop-off in
/// cluster `j`; rides touching an outlier or a dropped cluster add nothing.
pub fn build_station_graph(
    positions: &PositionSet,
    clusters: &ClusterSet<GeoPoint>,
    records: &[TrajectoryRecord],
    opts: &GraphOptions,
) -> Result<StationGraph, GraphError> {
    if clusters.labels.len() != positions.len() {
        return Err(GraphError::ClusterMismatch { clusters: clusters.labels.len(), positions: positions.len() });
    }
    let k = clusters.cluster_count();
    if let Some(s) = &opts.snapshot {
        if s.len() != k {
            return Err(GraphError::SnapshotMismatch { got: s.len(), want: k });
        }
    }
    let mut drops = vec![0i64; k];
    let mut picks = vec![0i64; k];
    for (p, label) in positions.points().iter().zip(&clusters.labels) {
        if let Some(c) = *label {
            match p.kind {
                PositionKind::Dropoff => drops[c] += 1,
                PositionKind::Pickup => picks[c] += 1,
            }
        }
    }
    let bikes: Vec<u32> = (0..k)
        .map(|c| match &opts.snapshot {
            Some(s) => (s[c] as i64 + drops[c] - picks[c]).max(0) as u32,
            None => drops[c] as u32,
        })
        .collect();

    let mut vertex_of = vec![None; k];
    let mut vertices = Vec::new();
    for c in 0..k {
        if bikes[c] >= opts.min_station_size {
            vertex_of[c] = Some(vertices.len());
            vertices.push(Station::new(format!("c{c}"), clusters.points[clusters.centers[c]], bikes[c]));
        }
    }
    let n = vertices.len();
    let mut weights = vec![0u32; n * n];
    let vertex_at = |bike: &str, p: &GeoPoint| {
        positions.index_of(bike, p).and_then(|idx| clusters.labels[idx]).and_then(|c| vertex_of[c])
    };
    for r in records {
        if let (Some(i), Some(j)) = (vertex_at(&r.bike_id, &r.depart), vertex_at(&r.bike_id, &r.arrive)) {
            weights[i * n + j] += 1;
        }
    }
    Ok(StationGraph::with_weights(vertices, weights))
}

#[derive(Serialize, Deserialize)]
struct VertexJson {
    id: String,
    lat: f64,
    lon: f64,
    n: u32,
    level: Option<StationLevel>,
}

#[derive(Serialize, Deserialize)]
struct EdgeJson {
    from: String,
    to: String,
    w: u32,
    d_km: f64,
}

#[derive(Serialize, Deserialize)]
struct LoopJson {
    vertex: String,
    w: u32,
}

/// On-disk form: `{vertices: [{id, lat, lon, n, level}], edges: [{from, to, w, d_km}]}`
/// plus the diagonal of `W` as `self_loops`.
#[derive(Serialize, Deserialize)]
struct GraphJson {
    vertices: Vec<VertexJson>,
    edges: Vec<EdgeJson>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    self_loops: Vec<LoopJson>,
}

impl From<&StationGraph> for GraphJson {
    fn from(g: &StationGraph) -> Self {
        let vertices = g
            .vertices
            .iter()
            .map(|v| VertexJson { id: v.id.clone(), lat: v.location.lat(), lon: v.location.lon(), n: v.bikes, level: v.level })
            .collect();
        let edges = g
            .edges()
            .map(|(i, j, w)| EdgeJson {
                from: g.vertices[i].id.clone(),
                to: g.vertices[j].id.clone(),
                w,
                d_km: g.distance(i, j),
            })
            .collect();
        let self_loops = (0..g.len())
            .filter(|&i| g.weight(i, i) > 0)
            .map(|i| LoopJson { vertex: g.vertices[i].id.clone(), w: g.weight(i, i) })
            .collect();
        GraphJson { vertices, edges, self_loops }
    }
}

impl TryFrom<GraphJson> for StationGraph {
    type Error = GraphError;

    fn try_from(file: GraphJson) -> Result<Self, Self::Error> {
        let schema = |m: String| GraphError::Schema(m);
        let mut index = BTreeMap::new();
        let mut vertices = Vec::with_capacity(file.vertices.len());
        for v in file.vertices {
            let location = GeoPoint::new(v.lat, v.lon).map_err(|e| schema(format!("vertex {}: {e}", v.id)))?;
            if index.insert(v.id.clone(), vertices.len()).is_some() {
                return Err(schema(format!("duplicate vertex id {}", v.id)));
            }
            let station = Station::new(v.id, location, v.n);
            if v.level.is_some() && v.level != station.level {
                return Err(schema(format!("vertex {} has level {:?} but {} bikes", station.id, v.level, station.bikes)));
            }
            vertices.push(station);
        }
        let n = vertices.len();
        let lookup = |id: &str| index.get(id).copied().ok_or_else(|| schema(format!("unknown vertex {id}")));
        let mut weights = vec![0u32; n * n];
        for e in &file.edges {
            let (i, j) = (lookup(&e.from)?, lookup(&e.to)?);
            if i == j {
                return Err(schema(format!("edge {} -> {} is a self-loop", e.from, e.to)));
            }
            weights[i * n + j] = e.w;
        }
        for l in &file.self_loops {
            let i = lookup(&l.vertex)?;
            weights[i * n + i] = l.w;
        }
        let g = StationGraph::with_weights(vertices, weights);
        for e in &file.edges {
            let d = g.distance(lookup(&e.from)?, lookup(&e.to)?);
            if (d - e.d_km).abs() > 1e-6 * (1.0 + d) {
                return Err(schema(format!("edge {} -> {}: d_km {} disagrees with coordinates ({d})", e.from, e.to, e.d_km)));
            }
        }
        Ok(g)
    }
}

impl Serialize for StationGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GraphJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for StationGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let file = GraphJson::deserialize(d)?;
        StationGraph::try_from(file).map_err(serde::de::Error::custom)
    }
}

/// Station graphs of consecutive periods for one region, with the grid
/// codec shared by all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSequence {
    pub region_id: String,
    pub granularity: Granularity,
    pub start_period: i64,
    pub graphs: Vec<StationGraph>,
    /// `true` where the period had no data and an empty graph was inserted.
    pub filled: Vec<bool>,
    pub codec: GridCodec,
}

impl GraphSequence {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn period_of(&self, t: usize) -> i64 {
        self.start_period + t as i64
    }
}

/// Orders the per-period graphs, fills gaps with empty graphs and fits a
/// grid codec over the bounding box of every vertex.
pub fn build_graph_sequence(
    graphs: BTreeMap<i64, StationGraph>,
    region_id: impl Into<String>,
    granularity: Granularity,
    grid: &GridSpec,
) -> Result<GraphSequence, GraphError> {
    if graphs.len() < 2 {
        return Err(GraphError::InsufficientHistory(graphs.len()));
    }
    let start = *graphs.keys().next().expect("non-empty");
    let end = *graphs.keys().next_back().expect("non-empty");
    let mut ordered = Vec::with_capacity((end - start + 1) as usize);
    let mut filled = Vec::with_capacity(ordered.capacity());
    let mut graphs = graphs;
    for period in start..=end {
        match graphs.remove(&period) {
            Some(g) => {
                ordered.push(g);
                filled.push(false);
            }
            None => {
                ordered.push(StationGraph::empty());
                filled.push(true);
            }
        }
    }
    let codec = GridCodec::fit(&ordered, grid)?;
    Ok(GraphSequence { region_id: region_id.into(), granularity, start_period: start, graphs: ordered, filled, codec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{cluster_drop_offs, ClusterParams};
    use crate::geo::Haversine;
    use crate::ingest::extract_positions;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn graph(locs: &[(f64, f64)], w: &[(usize, usize, u32)]) -> StationGraph {
        let n = locs.len();
        let vertices = locs.iter().enumerate().map(|(i, &(a, b))| Station::new(format!("v{i}"), pt(a, b), 10)).collect();
        let mut weights = vec![0; n * n];
        for &(i, j, c) in w {
            weights[i * n + j] = c;
        }
        StationGraph::with_weights(vertices, weights)
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> StationGraph {
        let locs: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(39.8..40.0), rng.random_range(116.3..116.5))).collect();
        let mut w = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if rng.random_bool(0.3) {
                    w.push((i, j, rng.random_range(0..20)));
                }
            }
        }
        graph(&locs, &w)
    }

    #[test]
    fn levels_are_half_open() {
        assert_eq!(classify_station_level(5), Ok(StationLevel::Micro));
        assert_eq!(classify_station_level(9), Ok(StationLevel::Micro));
        assert_eq!(classify_station_level(10), Ok(StationLevel::Small));
        assert_eq!(classify_station_level(20), Ok(StationLevel::Medium));
        assert_eq!(classify_station_level(29), Ok(StationLevel::Medium));
        assert_eq!(classify_station_level(30), Ok(StationLevel::Large));
        assert_eq!(classify_station_level(4), Err(GraphError::BelowMinimum(4)));
    }

    #[test]
    fn edge_counts_are_directional() {
        let g = graph(&[(39.9, 116.4), (39.91, 116.41)], &[(0, 1, 3), (1, 0, 1)]);
        assert_eq!(g.weight(0, 1), 3);
        assert_eq!(g.weight(1, 0), 1);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1, 3), (1, 0, 1)]);
        assert_eq!(g.distance(0, 1), g.distance(1, 0));
        assert_eq!(g.distance(0, 0), 0.0);
    }

    #[test]
    fn revenue_single_edge() {
        // Two stations exactly 2 km apart along a meridian.
        let dlat = (2.0 / crate::geo::EARTH_RADIUS_KM).to_degrees();
        let g = graph(&[(10.0, 20.0), (10.0 + dlat, 20.0), (11.0, 21.0)], &[(0, 1, 3)]);
        assert!((g.distance(0, 1) - 2.0).abs() < 1e-9);
        assert!((station_revenue(&g, 0, 0.5).unwrap() - 3.0).abs() < 1e-9);
        assert_eq!(station_revenue(&g, 2, 0.5).unwrap(), 0.0);
        assert!(station_revenue(&g, 3, 0.5).is_err());
    }

    #[test]
    fn revenue_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(&mut rng, 20);
        let n = g.len();
        let mut expect = vec![0.0; n];
        for (i, e) in expect.iter_mut().enumerate() {
            for j in 0..n {
                let d = haversine_distance(g.vertices()[i].location, g.vertices()[j].location);
                for _ in 0..g.weight(i, j) {
                    *e += d * 1.7;
                }
            }
        }
        for (i, e) in expect.iter().enumerate() {
            let got = station_revenue(&g, i, 1.7).unwrap();
            assert!((got - e).abs() <= 1e-9 * (1.0 + e), "{got} vs {e}");
        }
    }

    #[test]
    fn utility_examples() {
        let g = graph(&[(39.9, 116.4), (39.91, 116.41), (39.95, 116.45)], &[(0, 1, 4)]);
        assert_eq!(station_utility(&g, 0).unwrap(), 0.5);
        assert_eq!(station_utility(&g, 1).unwrap(), 0.5);
        assert_eq!(station_utility(&g, 2).unwrap(), 0.0);
        let idle = graph(&[(39.9, 116.4)], &[]);
        assert_eq!(station_utility(&idle, 0), Err(GraphError::UndefinedUtility));
    }

    #[test]
    fn inferior_removal_is_a_conjunction() {
        // v2: no rides (P = U = 0). v0 -> v1 long ride; v3 <-> v0 short rides.
        let g = graph(
            &[(39.9, 116.4), (39.95, 116.45), (39.99, 116.49), (39.9001, 116.4001)],
            &[(0, 1, 1), (3, 0, 5), (0, 3, 5)],
        );
        let (p, u) = revenue_and_utility(&g, 1.0);
        assert!(p[3] < p[0] && u[3] > u[1]);
        // θ_P above P_3, θ_U between U_1 and U_3: v3 stays on utility alone,
        // v1 (no departures, one arrival) and v2 (idle) fall under both.
        let theta_p = p[3] + 1e-6;
        let theta_u = (u[1] + u[3]) / 2.0;
        let out = remove_inferior(&g, theta_p, theta_u, 1.0);
        let ids: Vec<&str> = out.vertices().iter().map(|v| v.id.as_str()).collect();
        assert_eq!(ids, vec!["v0", "v3"]);
        // With every utility under θ_U, only revenue can save a station.
        let out = remove_inferior(&g, theta_p, 1.0, 1.0);
        let ids: Vec<&str> = out.vertices().iter().map(|v| v.id.as_str()).collect();
        assert_eq!(ids, vec!["v0"]);
    }

    #[test]
    fn removal_drops_incident_edges() {
        let g = graph(&[(39.9, 116.4), (39.91, 116.41), (39.92, 116.42)], &[(0, 1, 9), (1, 0, 9), (2, 0, 1), (0, 2, 1)]);
        let out = remove_inferior(&g, 1e9, 0.2, 1.0);
        assert_eq!(out.len(), 2);
        assert_eq!(out.total_throughput(), 18);
    }

    #[test]
    fn percentiles() {
        assert_eq!(percentile_of(&[4.0, 1.0, 3.0, 2.0], 25.0), 1.75);
        assert_eq!(percentile_of(&[], 25.0), 0.0);
        assert_eq!(percentile_of(&[7.0], 90.0), 7.0);
    }

    #[test]
    fn graph_from_clusters() {
        // Two sites 1 km apart; 6 rides a -> b, 2 rides b -> a, 1 ride from an isolated spot.
        let a = pt(39.90, 116.40);
        let b = pt(39.909, 116.40);
        let stray = pt(39.95, 116.45);
        let mut records = Vec::new();
        let mut add = |bike: String, from: GeoPoint, to: GeoPoint| {
            records.push(TrajectoryRecord { user_id: "u".into(), bike_id: bike, depart_time: 0, depart: from, arrive_time: 60, arrive: to });
        };
        for k in 0..6 {
            add(format!("x{k}"), a, b);
        }
        for k in 0..2 {
            add(format!("y{k}"), b, a);
        }
        add("z".into(), stray, a);
        let positions = extract_positions(&records).unwrap();
        let params = ClusterParams { cutoff_km: 0.1, delta_fraction: 0.05, min_station_size: 2, ..Default::default() };
        let clusters = cluster_drop_offs(&positions.locations(), &params, &Haversine).unwrap();
        assert_eq!(clusters.cluster_count(), 2);
        let g = build_station_graph(&positions, &clusters, &records, &GraphOptions { min_station_size: 2, snapshot: None }).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.total_throughput(), 8);
        let ia = g.vertices().iter().position(|v| v.location == a).unwrap();
        let ib = 1 - ia;
        assert_eq!(g.weight(ia, ib), 6);
        assert_eq!(g.weight(ib, ia), 2);
        assert_eq!(g.vertices()[ib].bikes, 6);
        // The stray pickup sits in no cluster, so its drop-off at `a` counts
        // toward bikes but not toward any edge.
        assert_eq!(g.vertices()[ia].bikes, 3);

        let snap = GraphOptions { min_station_size: 0, snapshot: Some(vec![10, 10]) };
        let g2 = build_station_graph(&positions, &clusters, &records, &snap).unwrap();
        let total: u64 = g2.total_bikes();
        assert_eq!(total, 20 + 9 - 8);
        assert!(build_station_graph(&positions, &clusters, &records, &GraphOptions { min_station_size: 0, snapshot: Some(vec![1]) }).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = random_graph(&mut rng, 6);
        g.weights[0] = 4; // self-loop on v0
        let text = serde_json::to_string(&g).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["vertices"][0].get("level").is_some());
        assert!(v["edges"][0].get("d_km").is_some());
        let back: StationGraph = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);

        let bad = r#"{"vertices": [{"id": "a", "lat": 1.0, "lon": 1.0, "n": 5, "level": "micro"}], "edges": [{"from": "a", "to": "b", "w": 1, "d_km": 0.0}]}"#;
        assert!(serde_json::from_str::<StationGraph>(bad).is_err());
        let wrong_level = r#"{"vertices": [{"id": "a", "lat": 1.0, "lon": 1.0, "n": 5, "level": "large"}], "edges": []}"#;
        assert!(serde_json::from_str::<StationGraph>(wrong_level).is_err());
    }

    #[test]
    fn sequence_fills_gaps() {
        let g = graph(&[(39.9, 116.4)], &[]);
        let map: BTreeMap<i64, StationGraph> = [(1, g.clone()), (2, g.clone()), (4, g.clone())].into_iter().collect();
        let seq = build_graph_sequence(map, "r", Granularity::Day, &GridSpec::default()).unwrap();
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.filled, vec![false, false, true, false]);
        assert!(seq.graphs[2].is_empty());
        assert_eq!(seq.period_of(3), 4);

        let single: BTreeMap<i64, StationGraph> = [(1, g)].into_iter().collect();
        assert_eq!(build_graph_sequence(single, "r", Granularity::Day, &GridSpec::default()).unwrap_err(), GraphError::InsufficientHistory(1));
    }

    #[test]
    fn codec_box_covers_every_vertex() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map: BTreeMap<i64, StationGraph> = (0..60).map(|t| (t, random_graph(&mut rng, 8))).collect();
        let (mut lat_lo, mut lat_hi, mut lon_lo, mut lon_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for g in map.values() {
            for v in g.vertices() {
                lat_lo = lat_lo.min(v.location.lat());
                lat_hi = lat_hi.max(v.location.lat());
                lon_lo = lon_lo.min(v.location.lon());
                lon_hi = lon_hi.max(v.location.lon());
            }
        }
        let seq = build_graph_sequence(map, "r", Granularity::Day, &GridSpec::default()).unwrap();
        let c = &seq.codec;
        assert!(c.lat_min <= lat_lo && lat_hi <= c.lat_max);
        assert!(c.lon_min <= lon_lo && lon_hi <= c.lon_max);
        for g in &seq.graphs {
            assert!(c.encode(g).is_ok());
        }
    }

    proptest! {
        #[test]
        fn throughput_identities(seed in any::<u64>(), n in 1usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n);
            let total = g.total_throughput();
            let tp_sum: u64 = (0..n).map(|i| station_throughput(&g, i).unwrap()).sum();
            prop_assert_eq!(tp_sum, 2 * total);
            if total > 0 {
                let u_sum: f64 = (0..n).map(|i| station_utility(&g, i).unwrap()).sum();
                prop_assert!((u_sum - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn removal_matches_filter(seed in any::<u64>(), tp in 0.0..5.0f64, tu in 0.0..0.3f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, 30);
            let keep: Vec<String> = (0..g.len())
                .filter(|&i| {
                    let p = station_revenue(&g, i, 1.0).unwrap();
                    let u = station_utility(&g, i).unwrap_or(0.0);
                    !(p < tp && u < tu)
                })
                .map(|i| g.vertices()[i].id.clone())
                .collect();
            let out = remove_inferior(&g, tp, tu, 1.0);
            let got: Vec<String> = out.vertices().iter().map(|v| v.id.clone()).collect();
            prop_assert_eq!(got, keep);
        }
    }
}
