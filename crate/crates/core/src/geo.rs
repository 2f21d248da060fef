//! Geodesic and calendar features.
//!
//! Every point of a trajectory is turned into two 6-vectors: a spatial
//! context (normalized position plus distance/bearing to both neighbours)
//! and a temporal context (calendar components shifted into `[-0.5, 0.5]`).

use chrono::{DateTime, Datelike, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Default segment-distance normalizer in meters.
pub const DEFAULT_D_MAX: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub lon: f64,
    pub lat: f64,
    /// Epoch seconds, UTC.
    pub t: i64,
}

impl GpsPoint {
    pub fn new(lon: f64, lat: f64, t: i64) -> Self {
        Self { lon, lat, t }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lon.is_finite() && (-180.0..=180.0).contains(&self.lon)) {
            return Err(Error::InvalidTrajectory(format!(
                "longitude {} out of range",
                self.lon
            )));
        }
        if !(self.lat.is_finite() && (-90.0..=90.0).contains(&self.lat)) {
            return Err(Error::InvalidTrajectory(format!(
                "latitude {} out of range",
                self.lat
            )));
        }
        if self.t < 0 {
            return Err(Error::InvalidTrajectory(format!(
                "negative timestamp {}",
                self.t
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<GpsPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i64>,
}

impl Trajectory {
    /// Builds a trajectory, checking point ranges, non-emptiness and time order.
    pub fn new(id: impl Into<String>, points: Vec<GpsPoint>, label: Option<i64>) -> Result<Self> {
        let traj = Self {
            id: id.into(),
            points,
            label,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidTrajectory(format!(
                "trajectory {:?} has no points",
                self.id
            )));
        }
        for p in &self.points {
            p.validate()?;
        }
        if let Some(w) = self.points.windows(2).find(|w| w[1].t < w[0].t) {
            return Err(Error::InvalidTrajectory(format!(
                "trajectory {:?} has decreasing timestamps ({} -> {})",
                self.id, w[0].t, w[1].t
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Summed haversine length of the polyline, in meters.
    pub fn path_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| haversine_distance(&w[0], &w[1]))
            .sum()
    }

    /// Elapsed seconds between the first and last fix.
    pub fn duration(&self) -> i64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0,
        }
    }
}

/// Normalization bounds for positions and segment lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub d_max: f64,
}

impl BoundingBox {
    pub fn new(lon_min: f64, lon_max: f64, lat_min: f64, lat_max: f64, d_max: f64) -> Result<Self> {
        let bbox = Self {
            lon_min,
            lon_max,
            lat_min,
            lat_max,
            d_max,
        };
        bbox.validate()?;
        Ok(bbox)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lon_min, self.lon_max, self.lat_min, self.lat_max, self.d_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lon_min >= self.lon_max || self.lat_min >= self.lat_max {
            return Err(Error::Config(format!(
                "degenerate bounding box lon [{}, {}] lat [{}, {}]",
                self.lon_min, self.lon_max, self.lat_min, self.lat_max
            )));
        }
        if self.d_max <= 0.0 {
            return Err(Error::Config(format!("d_max must be positive, got {}", self.d_max)));
        }
        Ok(())
    }

    /// Tight box around every point of `trajs`. Zero extents are widened by
    /// a small margin so the result is never degenerate.
    pub fn fit<'a, I>(trajs: I, d_max: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Trajectory>,
    {
        let mut lon = (f64::INFINITY, f64::NEG_INFINITY);
        let mut lat = (f64::INFINITY, f64::NEG_INFINITY);
        for p in trajs.into_iter().flat_map(|t| t.points.iter()) {
            lon = (lon.0.min(p.lon), lon.1.max(p.lon));
            lat = (lat.0.min(p.lat), lat.1.max(p.lat));
        }
        if !lon.0.is_finite() {
            return Err(Error::InsufficientData("cannot fit a box to zero points".into()));
        }
        const MARGIN: f64 = 1e-4;
        if lon.1 - lon.0 < MARGIN {
            lon = (lon.0 - MARGIN, lon.1 + MARGIN);
        }
        if lat.1 - lat.0 < MARGIN {
            lat = (lat.0 - MARGIN, lat.1 + MARGIN);
        }
        Self::new(lon.0, lon.1, lat.0, lat.1, d_max)
    }

    pub fn contains(&self, p: &GpsPoint) -> bool {
        (self.lon_min..=self.lon_max).contains(&p.lon) && (self.lat_min..=self.lat_max).contains(&p.lat)
    }
}

/// `[lon_norm, lat_norm, d_fwd, az_fwd, d_bwd, az_bwd]`
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpatialContext(pub [f64; 6]);

/// `[day_of_year, day_of_month, day_of_week, hour, minute, second]`, each in `[-0.5, 0.5]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TemporalContext(pub [f64; 6]);

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_distance(a: &GpsPoint, b: &GpsPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `a` to `b`, degrees clockwise from
/// true north in `[0, 360)`. Coincident points give 0.
pub fn forward_azimuth(a: &GpsPoint, b: &GpsPoint) -> f64 {
    if a.lon == b.lon && a.lat == b.lat {
        return 0.0;
    }
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlon = (b.lon - a.lon).to_radians();
    let x = dlon.sin() * lat2.cos();
    let y = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    let deg = x.atan2(y).to_degrees().rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if deg >= 360.0 {
        0.0
    } else {
        deg
    }
}

fn segment_features(from: &GpsPoint, to: &GpsPoint, d_max: f64) -> (f64, f64) {
    let d = haversine_distance(from, to);
    if d == 0.0 {
        return (0.0, 0.0);
    }
    ((d / d_max).min(1.0), forward_azimuth(from, to) / 360.0)
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Spatial context of every point of `traj` under `bbox`.
///
/// Points outside the box are clamped to its edge for the position
/// features (logged at debug level); distances and
/// bearings always use the raw coordinates.
pub fn spatial_context(traj: &Trajectory, bbox: &BoundingBox) -> Result<Vec<SpatialContext>> {
    bbox.validate()?;
    let pts = &traj.points;
    if pts.iter().any(|p| !bbox.contains(p)) {
        log::debug!(
            "trajectory {:?} leaves the bounding box; positions clamped to the box edge",
            traj.id
        );
    }
    let lon_span = bbox.lon_max - bbox.lon_min;
    let lat_span = bbox.lat_max - bbox.lat_min;
    let n = pts.len();
    let mut out = Vec::with_capacity(n);
    for (i, p) in pts.iter().enumerate() {
        let (d_fwd, az_fwd) = if i + 1 < n {
            segment_features(p, &pts[i + 1], bbox.d_max)
        } else {
            (0.0, 0.0)
        };
        let (d_bwd, az_bwd) = if i > 0 {
            segment_features(p, &pts[i - 1], bbox.d_max)
        } else {
            (0.0, 0.0)
        };
        out.push(SpatialContext([
            clamp_unit((p.lon - bbox.lon_min) / lon_span),
            clamp_unit((p.lat - bbox.lat_min) / lat_span),
            d_fwd,
            az_fwd,
            d_bwd,
            az_bwd,
        ]));
    }
    Ok(out)
}

/// Calendar context of a UTC epoch timestamp.
///
/// Denominators: day-of-year 365, day-of-month 30, day-of-week 6
/// (Monday = 0), hour 23, minute 59, second 59. Each ratio is clamped to
/// `[0, 1]` and then shifted by `-0.5`.
pub fn temporal_context(t: i64) -> TemporalContext {
    let dt = DateTime::from_timestamp(t.max(0), 0).expect("non-negative timestamps are representable");
    let raw = [
        (dt.ordinal0() as f64) / 365.0,
        (dt.day0() as f64) / 30.0,
        (dt.weekday().num_days_from_monday() as f64) / 6.0,
        (dt.hour() as f64) / 23.0,
        (dt.minute() as f64) / 59.0,
        (dt.second() as f64) / 59.0,
    ];
    TemporalContext(raw.map(|v| v.clamp(0.0, 1.0) - 0.5))
}
