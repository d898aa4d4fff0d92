//! Fixed lat/lon raster that turns a station graph into a feature vector
//! and a predicted vector back into stations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;
use crate::graph::{Station, StationGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("vertex {id} at {location} lies outside the codec bounding box")]
    OutsideBox { id: String, location: GeoPoint },
    #[error("vector has {got} entries, codec expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector entry {index} is not a finite value in [0, 1]")]
    InvalidValue { index: usize },
    #[error("invalid codec: {0}")]
    Invalid(String),
}

/// Where a decoded station is placed inside its cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellAnchor {
    CellCenter,
    /// Mean location of the stations that fell in the cell in the history,
    /// or the cell center when there were none.
    #[default]
    HistoricalCentroid,
}

/// Requested grid shape when fitting a codec to a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub anchor: CellAnchor,
    /// Fixed normalisation constant; fitted from the history when `None`.
    pub cap_max: Option<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { rows: 16, cols: 16, anchor: CellAnchor::HistoricalCentroid, cap_max: None }
    }
}

/// Row-major grid over `[lat_min, lat_max] × [lon_min, lon_max]`. Cell
/// `row·cols + col`; row 0 holds the smallest latitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCodec", into = "RawCodec")]
pub struct GridCodec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub rows: usize,
    pub cols: usize,
    pub cap_max: f64,
    pub anchor: CellAnchor,
}

#[derive(Serialize, Deserialize)]
struct RawCodec {
    lat_min: f64,
    lat_max: f64,
    lon_min: f64,
    lon_max: f64,
    rows: usize,
    cols: usize,
    cap_max: f64,
    anchor: CellAnchor,
}

impl From<GridCodec> for RawCodec {
    fn from(c: GridCodec) -> Self {
        RawCodec {
            lat_min: c.lat_min,
            lat_max: c.lat_max,
            lon_min: c.lon_min,
            lon_max: c.lon_max,
            rows: c.rows,
            cols: c.cols,
            cap_max: c.cap_max,
            anchor: c.anchor,
        }
    }
}

impl TryFrom<RawCodec> for GridCodec {
    type Error = CodecError;

    fn try_from(r: RawCodec) -> Result<Self, Self::Error> {
        GridCodec::new([r.lat_min, r.lat_max], [r.lon_min, r.lon_max], r.rows, r.cols, r.cap_max, r.anchor)
    }
}

/// Margin added around the fitted bounding box, as a fraction of its span.
const BOX_MARGIN: f64 = 0.01;
/// Half-width in degrees used when every vertex shares a coordinate.
const DEGENERATE_HALF_WIDTH: f64 = 0.001;

impl GridCodec {
    pub fn new(lat: [f64; 2], lon: [f64; 2], rows: usize, cols: usize, cap_max: f64, anchor: CellAnchor) -> Result<Self, CodecError> {
        let all = [lat[0], lat[1], lon[0], lon[1], cap_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::Invalid("non-finite bound or cap_max".into()));
        }
        if lat[0] >= lat[1] || lon[0] >= lon[1] {
            return Err(CodecError::Invalid(format!("empty bounding box lat {lat:?} lon {lon:?}")));
        }
        if rows == 0 || cols == 0 {
            return Err(CodecError::Invalid(format!("grid {rows}×{cols} has no cells")));
        }
        if cap_max <= 0.0 {
            return Err(CodecError::Invalid(format!("cap_max must be positive, got {cap_max}")));
        }
        Ok(GridCodec { lat_min: lat[0], lat_max: lat[1], lon_min: lon[0], lon_max: lon[1], rows, cols, cap_max, anchor })
    }

    /// Fits the bounding box to every vertex of `graphs` (with a small
    /// margin) and, unless `spec.cap_max` is set, sets `cap_max` to the
    /// largest per-cell bike total rounded up to a multiple of 10.
    pub fn fit(graphs: &[StationGraph], spec: &GridSpec) -> Result<Self, CodecError> {
        let mut lat = [f64::INFINITY, f64::NEG_INFINITY];
        let mut lon = [f64::INFINITY, f64::NEG_INFINITY];
        for v in graphs.iter().flat_map(|g| g.vertices()) {
            lat = [lat[0].min(v.location.lat()), lat[1].max(v.location.lat())];
            lon = [lon[0].min(v.location.lon()), lon[1].max(v.location.lon())];
        }
        if !lat[0].is_finite() {
            lat = [0.0, 0.0];
            lon = [0.0, 0.0];
        }
        let pad = |b: [f64; 2], limit: f64| {
            let half = ((b[1] - b[0]) * BOX_MARGIN).max(DEGENERATE_HALF_WIDTH);
            [(b[0] - half).max(-limit), (b[1] + half).min(limit)]
        };
        let mut codec = GridCodec::new(pad(lat, 90.0), pad(lon, 180.0), spec.rows, spec.cols, 1.0, spec.anchor)?;
        codec.cap_max = match spec.cap_max {
            Some(c) => c,
            None => {
                let mut peak = 0.0f64;
                for g in graphs {
                    peak = peak.max(codec.cell_totals(g)?.into_iter().fold(0.0, f64::max));
                }
                ((peak / 10.0).ceil() * 10.0).max(10.0)
            }
        };
        GridCodec::new([codec.lat_min, codec.lat_max], [codec.lon_min, codec.lon_max], codec.rows, codec.cols, codec.cap_max, codec.anchor)
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat()) && (self.lon_min..=self.lon_max).contains(&p.lon())
    }

    /// Cell index of a point; the upper edges belong to the last row/column.
    pub fn cell_of(&self, p: &GeoPoint) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let bin = |v: f64, lo: f64, hi: f64, n: usize| (((v - lo) / (hi - lo) * n as f64) as usize).min(n - 1);
        let row = bin(p.lat(), self.lat_min, self.lat_max, self.rows);
        let col = bin(p.lon(), self.lon_min, self.lon_max, self.cols);
        Some(row * self.cols + col)
    }

    pub fn cell_center(&self, cell: usize) -> GeoPoint {
        let (row, col) = (cell / self.cols, cell % self.cols);
        let lat = self.lat_min + (row as f64 + 0.5) * (self.lat_max - self.lat_min) / self.rows as f64;
        let lon = self.lon_min + (col as f64 + 0.5) * (self.lon_max - self.lon_min) / self.cols as f64;
        GeoPoint::new(lat, lon).expect("cell centers lie inside a valid box")
    }

    /// Unnormalised bikes per cell.
    pub fn cell_totals(&self, g: &StationGraph) -> Result<Vec<f64>, CodecError> {
        let mut cells = vec![0.0; self.dim()];
        for v in g.vertices() {
            let cell = self
                .cell_of(&v.location)
                .ok_or_else(|| CodecError::OutsideBox { id: v.id.clone(), location: v.location })?;
            cells[cell] += v.bikes as f64;
        }
        Ok(cells)
    }

    /// Cell value `min(1, Σ n_i / cap_max)` over the stations in the cell.
    pub fn encode(&self, g: &StationGraph) -> Result<Vec<f64>, CodecError> {
        let mut cells = self.cell_totals(g)?;
        for c in &mut cells {
            *c = (*c / self.cap_max).min(1.0);
        }
        Ok(cells)
    }

    /// Turns an output vector into stations: a cell holding
    /// `round(y·cap_max) ≥ min_station_size` bikes becomes station `g{cell}`.
    /// `history` supplies the locations for the historical-centroid anchor.
    pub fn decode(&self, y: &[f64], min_station_size: u32, history: &[StationGraph]) -> Result<StationGraph, CodecError> {
        if y.len() != self.dim() {
            return Err(CodecError::DimensionMismatch { expected: self.dim(), got: y.len() });
        }
        if let Some(index) = y.iter().position(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(CodecError::InvalidValue { index });
        }
        let centroids = match self.anchor {
            CellAnchor::CellCenter => None,
            CellAnchor::HistoricalCentroid => Some(self.historical_centroids(history)),
        };
        let mut stations = Vec::new();
        for (cell, &v) in y.iter().enumerate() {
            let bikes = (v * self.cap_max).round() as u32;
            if bikes == 0 || bikes < min_station_size {
                continue;
            }
            let location = centroids
                .as_ref()
                .and_then(|c| c[cell])
                .unwrap_or_else(|| self.cell_center(cell));
            stations.push(Station::new(format!("g{cell}"), location, bikes));
        }
        Ok(StationGraph::from_vertices(stations))
    }

    fn historical_centroids(&self, history: &[StationGraph]) -> Vec<Option<GeoPoint>> {
        let mut sums = vec![(0.0, 0.0, 0usize); self.dim()];
        for v in history.iter().flat_map(|g| g.vertices()) {
            if let Some(cell) = self.cell_of(&v.location) {
                let s = &mut sums[cell];
                s.0 += v.location.lat();
                s.1 += v.location.lon();
                s.2 += 1;
            }
        }
        sums.into_iter()
            .enumerate()
            .map(|(cell, (lat, lon, n))| {
                if n == 0 {
                    return None;
                }
                let p = GeoPoint::new(lat / n as f64, lon / n as f64).ok()?;
                // Rounding in the mean may step across a cell edge.
                Some(if self.cell_of(&p) == Some(cell) { p } else { self.cell_center(cell) })
            })
            .collect()
    }
}
