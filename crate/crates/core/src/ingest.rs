//! Trajectory ingestion: CSV parsing, pickup/drop-off extraction and
//! partitioning into (region, period) buckets.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoError, GeoPoint};

const SECONDS_PER_DAY: i64 = 86_400;
const LEGACY_TS_FORMAT: &str = "%Y/%m/%d %H:%M:%S";

pub const CSV_HEADER: [&str; 8] = [
    "user_id",
    "bike_id",
    "depart_ts",
    "depart_lat",
    "depart_lon",
    "arrive_ts",
    "arrive_lat",
    "arrive_lon",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("missing or malformed header: {0}")]
    Header(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid region file: {0}")]
    RegionFile(String),
    #[error("regions {a} and {b} overlap")]
    OverlappingRegions { a: String, b: String },
    #[error("no records to extract positions from")]
    NoRecords,
}

/// One ride: who, which bike, where and when it started and ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub user_id: String,
    pub bike_id: String,
    /// Epoch seconds, UTC.
    pub depart_time: i64,
    pub depart: GeoPoint,
    pub arrive_time: i64,
    pub arrive: GeoPoint,
}

impl TrajectoryRecord {
    fn from_row(row: &csv::StringRecord) -> Result<Self, String> {
        if row.len() != CSV_HEADER.len() {
            return Err(format!("expected {} columns, found {}", CSV_HEADER.len(), row.len()));
        }
        let field = |i: usize| row[i].trim();
        let num = |i: usize| -> Result<f64, String> {
            field(i)
                .parse::<f64>()
                .map_err(|_| format!("{}: not a number: {:?}", CSV_HEADER[i], field(i)))
        };
        let point = |lat: usize, lon: usize| -> Result<GeoPoint, String> {
            GeoPoint::new(num(lat)?, num(lon)?).map_err(|e| match e {
                GeoError::OutOfRange { .. } => "coordinate out of range".to_string(),
                other => other.to_string(),
            })
        };
        let user_id = field(0).to_string();
        let bike_id = field(1).to_string();
        if bike_id.is_empty() {
            return Err("empty bike_id".into());
        }
        let depart_time = parse_timestamp(field(2))?;
        let depart = point(3, 4)?;
        let arrive_time = parse_timestamp(field(5))?;
        let arrive = point(6, 7)?;
        if depart_time > arrive_time {
            return Err("arrival precedes departure".into());
        }
        Ok(TrajectoryRecord { user_id, bike_id, depart_time, depart, arrive_time, arrive })
    }
}

/// Parses `YYYY/MM/DD HH:MM:SS` or ISO-8601 (with or without offset) into
/// epoch seconds. Timestamps without an offset are read as UTC.
pub fn parse_timestamp(s: &str) -> Result<i64, String> {
    if let Ok(t) = NaiveDateTime::parse_from_str(s, LEGACY_TS_FORMAT) {
        return Ok(t.and_utc().timestamp());
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc().timestamp());
        }
    }
    Err(format!("unrecognised timestamp {s:?}"))
}

/// Formats epoch seconds in the legacy `YYYY/MM/DD HH:MM:SS` layout.
pub fn format_timestamp(epoch: i64) -> String {
    DateTime::from_timestamp(epoch, 0)
        .map(|t| t.format(LEGACY_TS_FORMAT).to_string())
        .unwrap_or_else(|| epoch.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Collect bad rows and keep going.
    Lenient,
    /// Abort on the first bad row.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrajectories {
    pub records: Vec<TrajectoryRecord>,
    pub errors: Vec<RowError>,
}

/// Reads the 8-column trajectory CSV. Row order is preserved.
pub fn parse_trajectory_csv<R: Read>(input: R, mode: ParseMode) -> Result<ParsedTrajectories, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers()?.clone();
    if header.len() != CSV_HEADER.len() {
        return Err(IngestError::Header(format!(
            "expected {} columns, found {}",
            CSV_HEADER.len(),
            header.len()
        )));
    }
    let mut out = ParsedTrajectories::default();
    let mut row = csv::StringRecord::new();
    loop {
        let line = reader.position().line() + 1;
        let more = match reader.read_record(&mut row) {
            Ok(more) => more,
            Err(e) if mode == ParseMode::Lenient && !matches!(e.kind(), csv::ErrorKind::Io(_)) => {
                out.errors.push(RowError { line, message: e.to_string() });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if !more {
            break;
        }
        let line = row.position().map_or(line, |p| p.line());
        match TrajectoryRecord::from_row(&row) {
            Ok(rec) => out.records.push(rec),
            Err(message) => match mode {
                ParseMode::Strict => return Err(IngestError::Row { line, message }),
                ParseMode::Lenient => out.errors.push(RowError { line, message }),
            },
        }
    }
    Ok(out)
}

/// Writes records in the CSV layout read by [`parse_trajectory_csv`].
pub fn write_trajectory_csv<W: Write>(out: W, records: &[TrajectoryRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.user_id.clone(),
            r.bike_id.clone(),
            format_timestamp(r.depart_time),
            format!("{:.6}", r.depart.lat()),
            format!("{:.6}", r.depart.lon()),
            format_timestamp(r.arrive_time),
            format!("{:.6}", r.arrive.lat()),
            format!("{:.6}", r.arrive.lon()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionKind {
    Pickup,
    Dropoff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub bike_id: String,
    pub point: GeoPoint,
    pub time: i64,
    pub kind: PositionKind,
}

/// Deduplicated bike positions of one temporal subset.
///
/// No two entries share the same `(bike_id, lat, lon)`; the first
/// occurrence wins.
#[derive(Debug, Clone)]
pub struct PositionSet {
    points: Vec<Position>,
    source_count: usize,
    index: HashMap<(String, (u64, u64)), usize>,
}

impl PositionSet {
    pub fn points(&self) -> &[Position] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of records the positions came from (`M`).
    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn locations(&self) -> Vec<GeoPoint> {
        self.points.iter().map(|p| p.point).collect()
    }

    /// Index of the surviving position for this bike at exactly this point.
    pub fn index_of(&self, bike_id: &str, point: &GeoPoint) -> Option<usize> {
        self.index.get(&(bike_id.to_string(), point.bits())).copied()
    }
}

/// Removes exact `(bike_id, lat, lon)` duplicates, keeping first occurrences.
pub fn dedup_positions(raw: Vec<Position>, source_count: usize) -> PositionSet {
    let mut index = HashMap::with_capacity(raw.len());
    let mut points = Vec::with_capacity(raw.len());
    for p in raw {
        let key = (p.bike_id.clone(), p.point.bits());
        if let std::collections::hash_map::Entry::Vacant(slot) = index.entry(key) {
            slot.insert(points.len());
            points.push(p);
        }
    }
    PositionSet { points, source_count, index }
}

/// Emits a pickup and a drop-off per record (`2M` raw positions) and
/// removes exact duplicates, so `M <= N <= 2M`.
pub fn extract_positions(records: &[TrajectoryRecord]) -> Result<PositionSet, IngestError> {
    if records.is_empty() {
        return Err(IngestError::NoRecords);
    }
    let mut raw = Vec::with_capacity(records.len() * 2);
    for r in records {
        raw.push(Position {
            bike_id: r.bike_id.clone(),
            point: r.depart,
            time: r.depart_time,
            kind: PositionKind::Pickup,
        });
        raw.push(Position {
            bike_id: r.bike_id.clone(),
            point: r.arrive,
            time: r.arrive_time,
            kind: PositionKind::Dropoff,
        });
    }
    Ok(dedup_positions(raw, records.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Day,
    Week,
}

impl Granularity {
    pub fn seconds(self) -> i64 {
        match self {
            Granularity::Day => SECONDS_PER_DAY,
            Granularity::Week => 7 * SECONDS_PER_DAY,
        }
    }

    /// Period containing `epoch`. Weeks are ISO weeks starting Monday;
    /// 1970-01-01 was a Thursday, hence the three-day shift.
    pub fn period_of(self, epoch: i64) -> i64 {
        let day = epoch.div_euclid(SECONDS_PER_DAY);
        match self {
            Granularity::Day => day,
            Granularity::Week => (day + 3).div_euclid(7),
        }
    }

    /// Half-open `[start, end)` epoch-second interval of a period.
    pub fn interval(self, period: i64) -> (i64, i64) {
        let start = match self {
            Granularity::Day => period * SECONDS_PER_DAY,
            Granularity::Week => (period * 7 - 3) * SECONDS_PER_DAY,
        };
        (start, start + self.seconds())
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Day => "day",
            Granularity::Week => "week",
        })
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "day" | "daily" => Ok(Granularity::Day),
            "week" | "weekly" => Ok(Granularity::Week),
            other => Err(format!("unknown granularity {other:?} (expected day or week)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpatioTemporalKey {
    pub region_id: String,
    pub period_index: i64,
    pub granularity: Granularity,
}

impl SpatioTemporalKey {
    pub fn interval(&self) -> (i64, i64) {
        self.granularity.interval(self.period_index)
    }
}

/// A named polygon of `[lat, lon]` vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: String,
    pub polygon: Vec<[f64; 2]>,
}

impl Region {
    /// Even-odd ray cast. Points on an edge shared by two adjacent polygons
    /// land in exactly one of them.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        let (y, x) = (p.lat(), p.lon());
        let poly = &self.polygon;
        let mut inside = false;
        let mut j = poly.len().wrapping_sub(1);
        for i in 0..poly.len() {
            let (yi, xi) = (poly[i][0], poly[i][1]);
            let (yj, xj) = (poly[j][0], poly[j][1]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.polygon.len();
        (0..n).map(move |i| (self.polygon[i], self.polygon[(i + 1) % n]))
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// True when the segments cross at a single interior point.
fn segments_cross(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn on_boundary(r: &Region, v: [f64; 2]) -> bool {
    r.edges().any(|(a, b)| {
        orient(a, b, v).abs() <= 1e-12
            && v[0] >= a[0].min(b[0])
            && v[0] <= a[0].max(b[0])
            && v[1] >= a[1].min(b[1])
            && v[1] <= a[1].max(b[1])
    })
}

fn regions_overlap(a: &Region, b: &Region) -> bool {
    if a.edges().any(|(p1, p2)| b.edges().any(|(q1, q2)| segments_cross(p1, p2, q1, q2))) {
        return true;
    }
    // No crossings: overlap only if one polygon sits inside the other. Probe
    // the vertex centroid plus every vertex not lying on the other's boundary.
    let probe = |r: &Region, other: &Region| {
        let n = r.polygon.len() as f64;
        let c = r.polygon.iter().fold([0.0, 0.0], |acc, v| [acc[0] + v[0] / n, acc[1] + v[1] / n]);
        let centroid_inside = GeoPoint::new(c[0], c[1]).is_ok_and(|p| r.contains(&p) && other.contains(&p));
        centroid_inside
            || r.polygon.iter().any(|v| {
                !on_boundary(other, *v) && GeoPoint::new(v[0], v[1]).is_ok_and(|p| other.contains(&p))
            })
    };
    probe(a, b) || probe(b, a)
}

/// Spatial split of records: polygons from a region file, or one tag that
/// takes everything.
#[derive(Debug, Clone)]
pub enum Regions {
    Polygons(Vec<Region>),
    Whole(String),
}

impl Regions {
    /// Validates polygons (≥3 vertices, unique ids, pairwise disjoint).
    pub fn polygons(regions: Vec<Region>) -> Result<Self, IngestError> {
        for r in &regions {
            if r.polygon.len() < 3 {
                return Err(IngestError::RegionFile(format!("region {} has fewer than 3 vertices", r.region_id)));
            }
        }
        for (i, a) in regions.iter().enumerate() {
            for b in &regions[i + 1..] {
                if a.region_id == b.region_id {
                    return Err(IngestError::RegionFile(format!("duplicate region id {}", a.region_id)));
                }
                if regions_overlap(a, b) {
                    return Err(IngestError::OverlappingRegions { a: a.region_id.clone(), b: b.region_id.clone() });
                }
            }
        }
        Ok(Regions::Polygons(regions))
    }

    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        let regions: Vec<Region> =
            serde_json::from_str(text).map_err(|e| IngestError::RegionFile(e.to_string()))?;
        Self::polygons(regions)
    }

    fn locate(&self, p: &GeoPoint) -> Result<Option<&str>, IngestError> {
        match self {
            Regions::Whole(tag) => Ok(Some(tag)),
            Regions::Polygons(list) => {
                let mut hits = list.iter().filter(|r| r.contains(p));
                let first = hits.next();
                if let (Some(a), Some(b)) = (first, hits.next()) {
                    return Err(IngestError::OverlappingRegions { a: a.region_id.clone(), b: b.region_id.clone() });
                }
                Ok(first.map(|r| r.region_id.as_str()))
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub buckets: BTreeMap<SpatioTemporalKey, Vec<TrajectoryRecord>>,
    /// Records whose departure point lies outside every region.
    pub rejected: Vec<TrajectoryRecord>,
}

impl Partition {
    pub fn total(&self) -> usize {
        self.buckets.values().map(Vec::len).sum::<usize>() + self.rejected.len()
    }
}

/// Buckets each record by its departure point and departure time.
pub fn partition_spatiotemporal(
    records: &[TrajectoryRecord],
    regions: &Regions,
    granularity: Granularity,
) -> Result<Partition, IngestError> {
    let mut part = Partition::default();
    for r in records {
        match regions.locate(&r.depart)? {
            Some(region) => {
                let key = SpatioTemporalKey {
                    region_id: region.to_string(),
                    period_index: granularity.period_of(r.depart_time),
                    granularity,
                };
                part.buckets.entry(key).or_default().push(r.clone());
            }
            None => part.rejected.push(r.clone()),
        }
    }
    Ok(part)
}
