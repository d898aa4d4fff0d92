//! Great-circle geometry on a spherical Earth.
//!
//! Coordinates are stored in degrees and converted to radians inside
//! [`haversine_distance`]. Every distance in the crate is in kilometres.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("non-finite coordinate (lat {lat}, lon {lon})")]
    NonFinite { lat: f64, lon: f64 },
    #[error("coordinate out of range (lat {lat}, lon {lon})")]
    OutOfRange { lat: f64, lon: f64 },
}

/// A validated latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;

    fn try_from(raw: RawPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lat: p.lat, lon: p.lon }
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(GeoError::NonFinite { lat, lon });
        }
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::OutOfRange { lat, lon });
        }
        // -0.0 and 0.0 compare equal but hash differently; keep one representation.
        Ok(GeoPoint { lat: lat + 0.0, lon: lon + 0.0 })
    }

    #[inline]
    pub fn lat(&self) -> f64 {
        self.lat
    }

    #[inline]
    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Great-circle distance to `other` in kilometres.
    #[inline]
    pub fn distance_km(&self, other: &GeoPoint) -> f64 {
        haversine_distance(*self, *other)
    }

    /// Bit pattern of the coordinates, for exact-equality hashing.
    pub(crate) fn bits(&self) -> (u64, u64) {
        (self.lat.to_bits(), self.lon.to_bits())
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat, self.lon)
    }
}

/// Haversine function `H(θ) = sin²(θ/2)`.
#[inline]
fn hav(theta: f64) -> f64 {
    let s = (theta * 0.5).sin();
    s * s
}

/// Haversine great-circle distance in kilometres.
///
/// `d = 2R·asin(√h)` with `h = H(Δψ) + cos ψa · cos ψb · H(Δφ)`, where ψ is
/// latitude and φ longitude in radians. `h` is clamped to 1 so antipodal
/// rounding cannot leave the domain of `asin`.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat_a = a.lat.to_radians();
    let lat_b = b.lat.to_radians();
    let d_lat = (a.lat - b.lat).abs().to_radians();
    let d_lon = (a.lon - b.lon).abs().to_radians();
    let h = hav(d_lat) + lat_a.cos() * lat_b.cos() * hav(d_lon);
    2.0 * EARTH_RADIUS_KM * h.min(1.0).sqrt().asin()
}

/// Distance function over points of type `P`, used by the clustering code.
///
/// `sweep_key` must be a 1-D projection whose differences never exceed the
/// distance: `|key(a) - key(b)| <= distance(a, b)`. The clustering code
/// sorts by it to skip pairs that cannot be within range.
pub trait Metric<P>: Sync {
    fn distance(&self, a: &P, b: &P) -> f64;

    fn sweep_key(&self, p: &P) -> f64;
}

/// Haversine distance on [`GeoPoint`]s.
#[derive(Debug, Clone, Copy, Default)]
pub struct Haversine;

impl Metric<GeoPoint> for Haversine {
    #[inline]
    fn distance(&self, a: &GeoPoint, b: &GeoPoint) -> f64 {
        haversine_distance(*a, *b)
    }

    /// Meridian arc length from the equator; any great-circle path is at
    /// least as long as its latitude change.
    #[inline]
    fn sweep_key(&self, p: &GeoPoint) -> f64 {
        p.lat.to_radians() * EARTH_RADIUS_KM
    }
}

/// Euclidean distance on plane points, mostly for tests and small examples.
#[derive(Debug, Clone, Copy, Default)]
pub struct Planar;

impl Metric<[f64; 2]> for Planar {
    #[inline]
    fn distance(&self, a: &[f64; 2], b: &[f64; 2]) -> f64 {
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    #[inline]
    fn sweep_key(&self, p: &[f64; 2]) -> f64 {
        p[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    /// Spherical law of cosines, written independently of the haversine path.
    fn law_of_cosines(a: GeoPoint, b: GeoPoint) -> f64 {
        let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
        let dl = (b.lon() - a.lon()).to_radians();
        let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
        EARTH_RADIUS_KM * c.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn identical_points_are_zero_apart() {
        let a = pt(39.914548, 116.440848);
        assert_eq!(haversine_distance(a, a), 0.0);
    }

    #[test]
    fn first_trajectory_row_is_about_four_km() {
        let a = pt(39.914548, 116.440848);
        let b = pt(39.900323, 116.484110);
        let d = haversine_distance(a, b);
        let oracle = law_of_cosines(a, b);
        assert!((d - oracle).abs() / oracle < 1e-6, "{d} vs {oracle}");
        // Frozen from a 40-digit law-of-cosines evaluation (mpmath).
        let frozen = 4.014_780_272_406_372;
        assert!((d - frozen).abs() / frozen < 1e-6, "{d}");
        assert!((d - 4.0).abs() < 0.05);
    }

    #[test]
    fn rejects_bad_coordinates() {
        assert!(matches!(GeoPoint::new(f64::NAN, 0.0), Err(GeoError::NonFinite { .. })));
        assert!(matches!(GeoPoint::new(0.0, f64::INFINITY), Err(GeoError::NonFinite { .. })));
        assert!(matches!(GeoPoint::new(91.0, 0.0), Err(GeoError::OutOfRange { .. })));
        assert!(matches!(GeoPoint::new(0.0, -180.5), Err(GeoError::OutOfRange { .. })));
        assert!(GeoPoint::new(-90.0, 180.0).is_ok());
    }

    #[test]
    fn serde_validates() {
        let p: GeoPoint = serde_json::from_str(r#"{"lat": 1.5, "lon": 2.5}"#).unwrap();
        assert_eq!(p, pt(1.5, 2.5));
        assert!(serde_json::from_str::<GeoPoint>(r#"{"lat": 95.0, "lon": 2.5}"#).is_err());
    }

    #[test]
    fn antipodes_stay_finite() {
        let d = haversine_distance(pt(0.0, 0.0), pt(0.0, 180.0));
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_KM).abs() < 1e-9);
    }

    fn any_point() -> impl Strategy<Value = GeoPoint> {
        (-89.0..89.0f64, -179.0..179.0f64).prop_map(|(a, b)| pt(a, b))
    }

    proptest! {
        #[test]
        fn symmetric(a in any_point(), b in any_point()) {
            prop_assert_eq!(haversine_distance(a, b), haversine_distance(b, a));
        }

        #[test]
        fn triangle_inequality(a in any_point(), b in any_point(), c in any_point()) {
            let ac = haversine_distance(a, c);
            let ab = haversine_distance(a, b);
            let bc = haversine_distance(b, c);
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn grows_along_meridian(lat in -60.0..0.0f64, lon in -170.0..170.0f64, step in 0.001..10.0f64) {
            let a = pt(lat, lon);
            let near = pt(lat + step, lon);
            let far = pt(lat + 2.0 * step, lon);
            prop_assert!(haversine_distance(a, far) > haversine_distance(a, near));
        }

        #[test]
        fn sweep_key_is_a_lower_bound(a in any_point(), b in any_point()) {
            let m = Haversine;
            let gap = (m.sweep_key(&a) - m.sweep_key(&b)).abs();
            prop_assert!(gap <= m.distance(&a, &b) * (1.0 + 1e-12) + 1e-12);
        }
    }
}
