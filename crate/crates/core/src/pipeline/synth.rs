//! Synthetic trajectories: correlated random walks inside a box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GpsPoint, Trajectory, EARTH_RADIUS_M};

/// 2014-01-01T00:00:00Z and 2015-01-01T00:00:00Z.
const START_MIN: i64 = 1_388_534_400;
const START_MAX: i64 = 1_420_070_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    pub speed_mps: f64,
    pub dt_s: f64,
    /// Standard deviation of the per-step heading change (radians) of each
    /// movement regime. The regime index is the trajectory label.
    pub regimes: Vec<f64>,
    pub min_points: usize,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            lon_min: 8.55,
            lon_max: 8.70,
            lat_min: 41.10,
            lat_max: 41.20,
            speed_mps: 10.0,
            dt_s: 15.0,
            regimes: vec![0.05, 1.0],
            min_points: 20,
            max_points: 60,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("synthetic corpus size must be at least 1".into());
        }
        if !(self.lon_min < self.lon_max && self.lat_min < self.lat_max) {
            return bad(format!(
                "empty synthetic box lon [{}, {}] lat [{}, {}]",
                self.lon_min, self.lon_max, self.lat_min, self.lat_max
            ));
        }
        if self.lon_min < -180.0 || self.lon_max > 180.0 || self.lat_min < -85.0 || self.lat_max > 85.0 {
            return bad("synthetic box outside valid coordinates".into());
        }
        if !(self.speed_mps > 0.0 && self.dt_s >= 1.0) {
            return bad(format!("speed {} and dt {} must be positive (dt >= 1 s)", self.speed_mps, self.dt_s));
        }
        if self.regimes.is_empty() || self.regimes.iter().any(|s| !(*s >= 0.0)) {
            return bad(format!("regimes must be non-negative turn deviations, got {:?}", self.regimes));
        }
        if self.min_points < 2 || self.min_points > self.max_points {
            return bad(format!("point range {}..={} is invalid", self.min_points, self.max_points));
        }
        Ok(())
    }
}

/// Offset `(lon, lat)` by `dist` metres along `heading` (radians from north).
fn step(lon: f64, lat: f64, heading: f64, dist: f64) -> (f64, f64) {
    let dlat = dist * heading.cos() / EARTH_RADIUS_M;
    let dlon = dist * heading.sin() / (EARTH_RADIUS_M * lat.to_radians().cos());
    (lon + dlon.to_degrees(), lat + dlat.to_degrees())
}

fn walk(spec: &SyntheticSpec, index: usize, rng: &mut ChaCha8Rng) -> Trajectory {
    let regime = rng.random_range(0..spec.regimes.len());
    let turn = Normal::new(0.0, spec.regimes[regime]).expect("validated deviation");
    let n = rng.random_range(spec.min_points..=spec.max_points);
    let mut lon = rng.random_range(spec.lon_min..spec.lon_max);
    let mut lat = rng.random_range(spec.lat_min..spec.lat_max);
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut t = rng.random_range(START_MIN..START_MAX);
    let inside = |lon: f64, lat: f64| (spec.lon_min..=spec.lon_max).contains(&lon) && (spec.lat_min..=spec.lat_max).contains(&lat);

    let mut points = Vec::with_capacity(n);
    points.push(GpsPoint::new(lon, lat, t));
    for _ in 1..n {
        let dt = (spec.dt_s * rng.random_range(0.8..=1.2)).round().max(1.0);
        heading += turn.sample(rng).clamp(-std::f64::consts::PI, std::f64::consts::PI);
        let dist = spec.speed_mps * dt;
        let (mut nlon, mut nlat) = step(lon, lat, heading, dist);
        if !(spec.lon_min..=spec.lon_max).contains(&nlon) {
            heading = -heading;
            (nlon, nlat) = step(lon, lat, heading, dist);
        }
        if !(spec.lat_min..=spec.lat_max).contains(&nlat) {
            heading = std::f64::consts::PI - heading;
            (nlon, nlat) = step(lon, lat, heading, dist);
        }
        if !inside(nlon, nlat) {
            // corner: head back the way we came
            heading += std::f64::consts::PI;
            (nlon, nlat) = step(lon, lat, heading, dist);
        }
        (lon, lat) = (nlon.clamp(spec.lon_min, spec.lon_max), nlat.clamp(spec.lat_min, spec.lat_max));
        t += dt as i64;
        points.push(GpsPoint::new(lon, lat, t));
    }
    Trajectory {
        id: format!("syn{index:06}"),
        points,
        label: Some(regime as i64),
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n).map(|i| walk(spec, i, &mut rng)).collect())
}
