//! Seeded generator of labelled synthetic cities: planted stations, demand
//! that evolves over periods, and noisy ride records.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_distance, GeoPoint, EARTH_RADIUS_KM};
use crate::ingest::{extract_positions, Granularity, PositionSet, Region, TrajectoryRecord};
use crate::recommend::LegalPosition;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("could not place {wanted} stations {separation_km} km apart in the box (placed {placed})")]
    Infeasible { wanted: usize, placed: usize, separation_km: f64 },
}

/// How each station's planted demand changes from period to period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DriftModel {
    Constant,
    /// `base + amplitude` in even periods, `base − amplitude` in odd ones.
    Alternating { amplitude: u32 },
    /// `round(base · (1 + slope · t))`, floored at 0.
    LinearDrift { slope: f64 },
    /// `round(base · (1 + amplitude · sin(2π t / 7)))`, floored at 0.
    WeeklyPeriodic { amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rng_seed: u64,
    pub region_id: String,
    pub lat_range: [f64; 2],
    pub lon_range: [f64; 2],
    pub n_stations: usize,
    /// Inclusive range station capacities are drawn from; base demand is
    /// proportional to capacity.
    pub capacity_range: [u32; 2],
    /// Rides per period before drift.
    pub rides_per_period: usize,
    pub drift: DriftModel,
    /// Standard deviation of the endpoint scatter, km.
    pub noise_km: f64,
    pub n_periods: usize,
    pub granularity: Granularity,
    /// Minimum distance between planted stations; `4 · noise_km` when unset.
    pub min_separation_km: Option<f64>,
    /// Number of distinct bikes; twice the rides per period when unset.
    pub fleet_size: Option<usize>,
    /// Legal positions scattered in the box on top of the one per station.
    pub extra_positions: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rng_seed: 0,
            region_id: "r0".into(),
            lat_range: [39.90, 39.96],
            lon_range: [116.36, 116.44],
            n_stations: 30,
            capacity_range: [10, 40],
            rides_per_period: 500,
            drift: DriftModel::Constant,
            noise_km: 0.02,
            n_periods: 30,
            granularity: Granularity::Day,
            min_separation_km: None,
            fleet_size: None,
            extra_positions: 30,
        }
    }
}

/// First day of synthetic time, 2018-06-04 00:00 UTC (a Monday).
pub const BASE_EPOCH: i64 = 1_528_070_400;

/// Cycling speed used to derive ride durations.
const SPEED_KMH: f64 = 12.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let [la, lb] = self.lat_range;
        let [oa, ob] = self.lon_range;
        if GeoPoint::new(la, oa).is_err() || GeoPoint::new(lb, ob).is_err() || !(la < lb && oa < ob) {
            return bad(format!("box lat {:?} lon {:?} is not a valid non-empty box", self.lat_range, self.lon_range));
        }
        if self.n_stations == 0 || self.rides_per_period == 0 || self.n_periods == 0 {
            return bad("n_stations, rides_per_period and n_periods must all be positive".into());
        }
        let [c0, c1] = self.capacity_range;
        if c0 == 0 || c0 > c1 {
            return bad(format!("capacity range {:?} must be positive and ordered", self.capacity_range));
        }
        if !(self.noise_km >= 0.0 && self.noise_km.is_finite()) {
            return bad(format!("noise_km must be a finite value ≥ 0, got {}", self.noise_km));
        }
        if let Some(s) = self.min_separation_km {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("min_separation_km must be ≥ 0, got {s}"));
            }
        }
        if self.fleet_size == Some(0) {
            return bad("fleet_size must be positive".into());
        }
        match self.drift {
            DriftModel::LinearDrift { slope } if !slope.is_finite() => bad("slope must be finite".into()),
            DriftModel::WeeklyPeriodic { amplitude } if !amplitude.is_finite() => bad("amplitude must be finite".into()),
            _ => Ok(()),
        }
    }

    pub fn min_separation(&self) -> f64 {
        self.min_separation_km.unwrap_or(4.0 * self.noise_km)
    }

    pub fn region(&self) -> Region {
        let [la, lb] = self.lat_range;
        let [oa, ob] = self.lon_range;
        Region { region_id: self.region_id.clone(), polygon: vec![[la, oa], [la, ob], [lb, ob], [lb, oa]] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedStation {
    pub id: String,
    #[serde(flatten)]
    pub location: GeoPoint,
    pub capacity: u32,
    /// Demand per period before drift.
    pub base_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodTruth {
    pub period_index: i64,
    /// Rides ending at each station in this period.
    pub counts: Vec<u32>,
    /// `od[o][d]`: rides from station `o` to station `d`.
    pub od: Vec<Vec<u32>>,
    /// `(origin, destination)` station of each emitted record, in order.
    pub rides: Vec<(usize, usize)>,
}

impl PeriodTruth {
    pub fn ride_count(&self) -> usize {
        self.rides.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub region_id: String,
    pub granularity: Granularity,
    pub stations: Vec<PlantedStation>,
    pub periods: Vec<PeriodTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPeriod {
    pub period_index: i64,
    pub records: Vec<TrajectoryRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCity {
    pub periods: Vec<SynthPeriod>,
    pub truth: GroundTruth,
    pub region: Region,
    pub legal_positions: Vec<LegalPosition>,
}

impl SynthCity {
    /// Every record of every period, in period order.
    pub fn all_records(&self) -> Vec<TrajectoryRecord> {
        self.periods.iter().flat_map(|p| p.records.iter().cloned()).collect()
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn rounded_point(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(round6(lat.clamp(-90.0, 90.0)), round6(lon.clamp(-180.0, 180.0))).expect("clamped into range")
}

/// Splits `total` over `weights` proportionally, distributing the
/// remainder to the largest fractional parts (ties to lower index).
pub fn largest_remainder(total: u64, weights: &[u32]) -> Vec<u32> {
    let sum: u64 = weights.iter().map(|&w| w as u64).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<u32> = weights.iter().map(|&w| (total * w as u64 / sum) as u32).collect();
    let assigned: u64 = out.iter().map(|&c| c as u64).sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((total * weights[i] as u64) % sum));
    for &i in order.iter().take((total - assigned) as usize) {
        out[i] += 1;
    }
    out
}

/// Demand at station with base `base` in period offset `t`.
pub fn drifted_count(drift: &DriftModel, base: u32, t: usize) -> u32 {
    let scaled = |f: f64| (base as f64 * f).round().max(0.0) as u32;
    match *drift {
        DriftModel::Constant => base,
        DriftModel::Alternating { amplitude } => {
            if t.is_multiple_of(2) {
                base + amplitude
            } else {
                base.saturating_sub(amplitude)
            }
        }
        DriftModel::LinearDrift { slope } => scaled(1.0 + slope * t as f64),
        DriftModel::WeeklyPeriodic { amplitude } => {
            scaled(1.0 + amplitude * (2.0 * std::f64::consts::PI * t as f64 / 7.0).sin())
        }
    }
}

fn plant_stations(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<GeoPoint>, SynthError> {
    let sep = cfg.min_separation();
    // Keep planted stations about 3σ from the box edge.
    let margin = (3.0 * cfg.noise_km / EARTH_RADIUS_KM).to_degrees();
    let budget = 1000 * cfg.n_stations + 10_000;
    let mut placed: Vec<GeoPoint> = Vec::with_capacity(cfg.n_stations);
    for _ in 0..budget {
        if placed.len() == cfg.n_stations {
            break;
        }
        let p = uniform_point(cfg, margin, rng);
        if placed.iter().all(|q| haversine_distance(p, *q) >= sep) {
            placed.push(p);
        }
    }
    if placed.len() < cfg.n_stations {
        return Err(SynthError::Infeasible { wanted: cfg.n_stations, placed: placed.len(), separation_km: sep });
    }
    Ok(placed)
}

/// Point scattered around `c` with isotropic Gaussian noise of `sigma` km,
/// kept strictly inside the box and rounded to the 6 decimals the CSV keeps.
fn scatter(c: GeoPoint, sigma: f64, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> GeoPoint {
    if sigma == 0.0 {
        return c;
    }
    let n = Normal::new(0.0, sigma).expect("sigma validated");
    let dy: f64 = n.sample(rng);
    let dx: f64 = n.sample(rng);
    let dlat = (dy / EARTH_RADIUS_KM).to_degrees();
    let dlon = (dx / (EARTH_RADIUS_KM * c.lat().to_radians().cos().max(1e-6))).to_degrees();
    let inside = |v: f64, r: [f64; 2]| round6(v).clamp(r[0] + EDGE_GAP_DEG, r[1] - EDGE_GAP_DEG);
    rounded_point(inside(c.lat() + dlat, cfg.lat_range), inside(c.lon() + dlon, cfg.lon_range))
}

/// Distance kept from the box edges, in degrees, so points never sit on
/// the region boundary.
const EDGE_GAP_DEG: f64 = 2e-6;

/// Uniform point in the box, shrunk by `margin_deg` on each side.
fn uniform_point(cfg: &SynthConfig, margin_deg: f64, rng: &mut ChaCha8Rng) -> GeoPoint {
    let pick = |r: [f64; 2], rng: &mut ChaCha8Rng| {
        let m = margin_deg.min((r[1] - r[0]) * 0.1).max(EDGE_GAP_DEG);
        rng.random_range(r[0] + m..r[1] - m)
    };
    let lat = pick(cfg.lat_range, rng);
    let lon = pick(cfg.lon_range, rng);
    rounded_point(lat, lon)
}

/// Generates a synthetic city. Identical configs give identical output;
/// each period draws from its own stream of the seeded generator.
pub fn generate_synthetic_city(cfg: &SynthConfig) -> Result<SynthCity, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let locations = plant_stations(cfg, &mut rng)?;
    let capacities: Vec<u32> = (0..cfg.n_stations).map(|_| rng.random_range(cfg.capacity_range[0]..=cfg.capacity_range[1])).collect();
    let base = largest_remainder(cfg.rides_per_period as u64, &capacities);
    if let DriftModel::Alternating { amplitude } = cfg.drift {
        let low = *base.iter().min().expect("n_stations > 0");
        if amplitude > low {
            return Err(SynthError::Config(format!("alternating amplitude {amplitude} exceeds the smallest base count {low}")));
        }
    }
    let stations: Vec<PlantedStation> = (0..cfg.n_stations)
        .map(|s| PlantedStation { id: format!("s{s}"), location: locations[s], capacity: capacities[s], base_count: base[s] })
        .collect();

    let mut legal_positions: Vec<LegalPosition> = stations
        .iter()
        .map(|s| LegalPosition { id: String::new(), location: s.location, capacity: s.capacity })
        .collect();
    for _ in 0..cfg.extra_positions {
        let p = uniform_point(cfg, 0.0, &mut rng);
        legal_positions.push(LegalPosition { id: String::new(), location: p, capacity: rng.random_range(cfg.capacity_range[0]..=cfg.capacity_range[1]) });
    }
    for (k, p) in legal_positions.iter_mut().enumerate() {
        p.id = (k + 1).to_string();
    }

    let fleet = cfg.fleet_size.unwrap_or(2 * cfg.rides_per_period);
    let origin_pick = WeightedIndex::new(capacities.iter().map(|&c| c as f64)).expect("capacities are positive");
    let first_period = cfg.granularity.period_of(BASE_EPOCH);
    let span = cfg.granularity.seconds();

    let mut periods = Vec::with_capacity(cfg.n_periods);
    let mut truths = Vec::with_capacity(cfg.n_periods);
    for t in 0..cfg.n_periods {
        let mut prng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        prng.set_stream(t as u64 + 1);
        let period_index = first_period + t as i64;
        let (start, _) = cfg.granularity.interval(period_index);
        let counts: Vec<u32> = base.iter().map(|&b| drifted_count(&cfg.drift, b, t)).collect();

        let mut rides: Vec<(i64, usize, usize)> = Vec::new();
        for (d, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                let o = origin_pick.sample(&mut prng);
                rides.push((start + prng.random_range(0..span), o, d));
            }
        }
        rides.sort_by_key(|&(time, o, d)| (time, o, d));

        let mut od = vec![vec![0u32; cfg.n_stations]; cfg.n_stations];
        let mut records = Vec::with_capacity(rides.len());
        let mut labels = Vec::with_capacity(rides.len());
        for (k, &(depart_time, o, d)) in rides.iter().enumerate() {
            od[o][d] += 1;
            let depart = scatter(stations[o].location, cfg.noise_km, cfg, &mut prng);
            let arrive = scatter(stations[d].location, cfg.noise_km, cfg, &mut prng);
            let ride_s = haversine_distance(depart, arrive) / SPEED_KMH * 3600.0;
            let duration = ride_s.round() as i64 + prng.random_range(60..=300);
            let bike = prng.random_range(0..fleet);
            records.push(TrajectoryRecord {
                user_id: format!("u{t}-{k}"),
                bike_id: format!("b{bike:06}"),
                depart_time,
                depart,
                arrive_time: depart_time + duration,
                arrive,
            });
            labels.push((o, d));
        }
        periods.push(SynthPeriod { period_index, records });
        truths.push(PeriodTruth { period_index, counts, od, rides: labels });
    }
    let truth = GroundTruth { region_id: cfg.region_id.clone(), granularity: cfg.granularity, stations, periods: truths };
    Ok(SynthCity { periods, truth, region: cfg.region(), legal_positions })
}

/// Positions of `records` (as [`extract_positions`] builds them) with the
/// planted station each surviving position came from.
pub fn label_positions(records: &[TrajectoryRecord], rides: &[(usize, usize)]) -> Option<(PositionSet, Vec<usize>)> {
    if records.len() != rides.len() {
        return None;
    }
    let positions = extract_positions(records).ok()?;
    let mut labels = vec![usize::MAX; positions.len()];
    for (r, &(o, d)) in records.iter().zip(rides) {
        for (point, station) in [(&r.depart, o), (&r.arrive, d)] {
            let idx = positions.index_of(&r.bike_id, point).expect("every endpoint has a surviving position");
            if labels[idx] == usize::MAX {
                labels[idx] = station;
            }
        }
    }
    Some((positions, labels))
}
