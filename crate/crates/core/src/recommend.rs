//! Snapping predicted stations onto legal parking positions with finite
//! capacity.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_distance, GeoPoint};
use crate::graph::{classify_station_level, Station, StationGraph, StationLevel};

#[derive(Debug, Error)]
pub enum RecommendError {
    #[error("distance threshold must be a positive number of km, got {0}")]
    InvalidThreshold(f64),
    #[error("no legal parking positions")]
    NoPositions,
    #[error("legal positions line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("duplicate legal position id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegalPosition {
    #[serde(rename = "position_id")]
    pub id: String,
    #[serde(flatten)]
    pub location: GeoPoint,
    pub capacity: u32,
}

/// Position ids compare numerically when both are integers, else as text.
pub fn compare_position_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

#[derive(Deserialize)]
struct PositionRow {
    position_id: String,
    lat: f64,
    lon: f64,
    capacity: u32,
}

/// Reads `position_id,lat,lon,capacity` rows.
pub fn read_legal_positions<R: Read>(reader: R) -> Result<Vec<LegalPosition>, RecommendError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: Vec<LegalPosition> = Vec::new();
    let mut seen = BTreeSet::new();
    let headers = rdr.headers()?.clone();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |message: String| RecommendError::Row { line, message };
        let r: PositionRow = record.deserialize(Some(&headers)).map_err(|e| row_err(e.to_string()))?;
        let location = GeoPoint::new(r.lat, r.lon).map_err(|e| row_err(e.to_string()))?;
        let p = LegalPosition { id: r.position_id, location, capacity: r.capacity };
        if !seen.insert(p.id.clone()) {
            return Err(RecommendError::DuplicateId(p.id));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_legal_positions<W: Write>(writer: W, positions: &[LegalPosition]) -> Result<(), RecommendError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["position_id", "lat", "lon", "capacity"])?;
    for p in positions {
        w.write_record([
            p.id.clone(),
            format!("{:.6}", p.location.lat()),
            format!("{:.6}", p.location.lon()),
            p.capacity.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Index of the position nearest to `station` and its distance in km;
/// equal distances go to the lower position id.
pub fn match_legal_position(station: &Station, positions: &[LegalPosition]) -> Result<(usize, f64), RecommendError> {
    nearest(station.location, positions).ok_or(RecommendError::NoPositions)
}

fn nearest(from: GeoPoint, positions: &[LegalPosition]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, p) in positions.iter().enumerate() {
        let d = haversine_distance(from, p.location);
        let better = match best {
            None => true,
            Some((b, bd)) => d < bd || (d == bd && compare_position_ids(&p.id, &positions[b].id) == Ordering::Less),
        };
        if better {
            best = Some((j, d));
        }
    }
    best
}

/// How a station was resolved against its nearest legal position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    /// Within the distance threshold and the position had room.
    A,
    /// Within the threshold but short of room; the overflow was split off.
    B,
    /// Farther than the threshold; moved onto the position first.
    C,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedStation {
    pub id: String,
    #[serde(flatten)]
    pub location: GeoPoint,
    #[serde(rename = "n")]
    pub bikes: u32,
    pub level: Option<StationLevel>,
    pub position_id: String,
    pub case: Case,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjustment {
    pub station_id: String,
    pub case: Case,
    /// Distance from the predicted location to the nearest legal position.
    pub moved_km: f64,
    /// Ids of the extra stations created for the overflow.
    pub split_into: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayoutRecommendation {
    pub stations: Vec<RecommendedStation>,
    /// Bikes no position had room for.
    pub unplaced: u64,
    pub adjustments: Vec<Adjustment>,
}

/// Places every predicted station at a legal position.
///
/// Stations are handled largest first (ties keep graph order), against a
/// capacity ledger shared by all stations. Each station goes to its
/// nearest position; bikes beyond that position's remaining room move on
/// to the next-nearest positions that still have room, each such piece
/// becoming a new station `{id}-s{k}`. Bikes left when every position is
/// full are counted as unplaced.
pub fn fine_tune_layout(predicted: &StationGraph, positions: &[LegalPosition], theta_d: f64) -> Result<LayoutRecommendation, RecommendError> {
    if !(theta_d > 0.0 && theta_d.is_finite()) {
        return Err(RecommendError::InvalidThreshold(theta_d));
    }
    let mut rec = LayoutRecommendation::default();
    if predicted.is_empty() {
        return Ok(rec);
    }
    let mut remaining: Vec<u32> = positions.iter().map(|p| p.capacity).collect();
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(predicted.vertices()[i].bikes));

    for i in order {
        let v = &predicted.vertices()[i];
        let Some((j, d)) = nearest(v.location, positions) else {
            rec.unplaced += v.bikes as u64;
            continue;
        };
        let case = if d > theta_d {
            Case::C
        } else if remaining[j] >= v.bikes {
            Case::A
        } else {
            Case::B
        };
        let mut pieces: Vec<(usize, u32)> = Vec::new();
        let first = remaining[j].min(v.bikes);
        if first > 0 || v.bikes == 0 {
            pieces.push((j, first));
            remaining[j] -= first;
        }
        let mut overflow = v.bikes - first;
        if overflow > 0 {
            let mut others: Vec<(f64, usize)> = (0..positions.len())
                .filter(|&k| k != j && remaining[k] > 0)
                .map(|k| (haversine_distance(v.location, positions[k].location), k))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| compare_position_ids(&positions[a.1].id, &positions[b.1].id)));
            for (_, k) in others {
                if overflow == 0 {
                    break;
                }
                let take = remaining[k].min(overflow);
                pieces.push((k, take));
                remaining[k] -= take;
                overflow -= take;
            }
        }
        rec.unplaced += overflow as u64;

        let mut split_into = Vec::new();
        for (n, &(k, bikes)) in pieces.iter().enumerate() {
            let id = if n == 0 {
                v.id.clone()
            } else {
                let id = format!("{}-s{n}", v.id);
                split_into.push(id.clone());
                id
            };
            rec.stations.push(RecommendedStation {
                id,
                location: positions[k].location,
                bikes,
                level: classify_station_level(bikes).ok(),
                position_id: positions[k].id.clone(),
                case,
            });
        }
        rec.adjustments.push(Adjustment { station_id: v.id.clone(), case, moved_km: d, split_into });
    }
    Ok(rec)
}
