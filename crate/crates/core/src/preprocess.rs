//! Dataset cleaning: drift-point removal, redundant-cluster reduction and
//! length filters.

use serde::{Deserialize, Serialize};

use crate::blur::{build_hierarchy_with, PrecisionLevels};
use crate::error::{Error, Result};
use crate::geo::{haversine_distance, GpsPoint, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Drift threshold, m/s.
    pub v_max: f64,
    /// Cluster radius, meters.
    pub cluster_radius: f64,
    /// A cluster is collapsed when it holds strictly more points than this.
    pub cluster_count: usize,
    /// Minimum path length, meters (inclusive).
    pub min_length: f64,
    /// Minimum level-3 sequence length (inclusive).
    pub min_level3_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            v_max: 33.3,
            cluster_radius: 50.0,
            cluster_count: 10,
            min_length: 1000.0,
            min_level3_len: 2,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.v_max > 0.0
            && self.cluster_radius > 0.0
            && self.cluster_count > 0
            && self.min_length > 0.0
            && self.min_level3_len > 0;
        if positive {
            Ok(())
        } else {
            Err(Error::Config(format!("preprocess values must be positive: {self:?}")))
        }
    }
}

fn implied_speed(a: &GpsPoint, b: &GpsPoint) -> f64 {
    let d = haversine_distance(a, b);
    let dt = (b.t - a.t) as f64;
    if d == 0.0 {
        0.0
    } else if dt <= 0.0 {
        f64::INFINITY
    } else {
        d / dt
    }
}

/// Drop every point whose implied speed from the last retained point
/// exceeds `v_max`. The first point is always kept.
pub fn remove_drift(traj: &Trajectory, cfg: &PreprocessConfig) -> Trajectory {
    let mut kept: Vec<GpsPoint> = Vec::with_capacity(traj.len());
    for p in &traj.points {
        match kept.last() {
            Some(last) if implied_speed(last, p) > cfg.v_max => {}
            _ => kept.push(*p),
        }
    }
    Trajectory {
        id: traj.id.clone(),
        points: kept,
        label: traj.label,
    }
}

fn reduce_once(points: &[GpsPoint], cfg: &PreprocessConfig) -> Vec<GpsPoint> {
    let mut out = Vec::with_capacity(points.len());
    let mut i = 0;
    while i < points.len() {
        let anchor = &points[i];
        let mut end = i + 1;
        while end < points.len() && haversine_distance(anchor, &points[end]) <= cfg.cluster_radius {
            end += 1;
        }
        if end - i > cfg.cluster_count {
            out.push(points[i]);
            out.push(points[end - 1]);
            i = end;
        } else {
            out.push(points[i]);
            i += 1;
        }
    }
    out
}

/// Collapse each maximal run of consecutive points lying within
/// `cluster_radius` of the run's first point, and holding more than
/// `cluster_count` points, to its first and last point.
///
/// The pass is repeated until nothing changes, so the result is a fixed
/// point of the reduction.
pub fn reduce_redundancy(traj: &Trajectory, cfg: &PreprocessConfig) -> Trajectory {
    let mut points = traj.points.clone();
    loop {
        let next = reduce_once(&points, cfg);
        if next.len() == points.len() {
            break;
        }
        points = next;
    }
    Trajectory {
        id: traj.id.clone(),
        points,
        label: traj.label,
    }
}

/// Keep trajectories with path length `>= min_length` and level-3 length
/// `>= min_level3_len`.
pub fn filter_trajectories(
    trajs: Vec<Trajectory>,
    cfg: &PreprocessConfig,
    precisions: PrecisionLevels,
) -> Vec<Trajectory> {
    trajs
        .into_iter()
        .filter(|t| {
            t.path_length() >= cfg.min_length
                && build_hierarchy_with(t, precisions).level_len(3) >= cfg.min_level3_len
        })
        .collect()
}

/// Full cleaning pipeline: drift removal, redundancy reduction, filters.
pub fn preprocess_all(
    trajs: Vec<Trajectory>,
    cfg: &PreprocessConfig,
    precisions: PrecisionLevels,
) -> Vec<Trajectory> {
    let cleaned = trajs
        .iter()
        .map(|t| reduce_redundancy(&remove_drift(t, cfg), cfg))
        .collect();
    filter_trajectories(cleaned, cfg, precisions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::EARTH_RADIUS_M;

    fn meters_to_lon_deg(m: f64, lat: f64) -> f64 {
        (m / (EARTH_RADIUS_M * lat.to_radians().cos())).to_degrees()
    }

    fn line(n: usize, spacing_m: f64, dt: i64) -> Trajectory {
        let lat = 41.15;
        let step = meters_to_lon_deg(spacing_m, lat);
        let pts = (0..n)
            .map(|i| GpsPoint::new(8.6 + step * i as f64, lat, 1_400_000_000 + dt * i as i64))
            .collect();
        Trajectory::new("line", pts, None).unwrap()
    }

    #[test]
    fn drift_noop_when_slow() {
        let t = line(20, 150.0, 15);
        assert_eq!(remove_drift(&t, &PreprocessConfig::default()), t);
    }

    #[test]
    fn drift_removes_injected_point() {
        let mut t = line(30, 150.0, 15);
        t.points[12].lat += (5000.0 / EARTH_RADIUS_M).to_degrees();
        let cleaned = remove_drift(&t, &PreprocessConfig::default());
        assert_eq!(cleaned.len(), 29);
        assert!(!cleaned.points.contains(&t.points[12]));
        for w in cleaned.points.windows(2) {
            assert!(implied_speed(&w[0], &w[1]) <= 33.3);
        }
    }

    #[test]
    fn drift_keeps_slow_pair() {
        let t = line(2, 1.0, 1);
        assert_eq!(remove_drift(&t, &PreprocessConfig::default()).len(), 2);
    }

    #[test]
    fn cluster_of_twelve_collapses() {
        let mut pts = line(3, 200.0, 15).points;
        let base = pts[2];
        for k in 1..=11 {
            pts.push(GpsPoint::new(base.lon + 1e-5 * k as f64, base.lat, base.t + 15 * k));
        }
        // 12-point cluster = base + 11 jitters; then leave.
        let tail = line(3, 200.0, 15).points;
        let shift = meters_to_lon_deg(1000.0, 41.15);
        for (k, p) in tail.iter().enumerate() {
            pts.push(GpsPoint::new(p.lon + shift, p.lat, base.t + 400 + 15 * k as i64));
        }
        let t = Trajectory::new("c", pts.clone(), None).unwrap();
        let r = reduce_redundancy(&t, &PreprocessConfig::default());
        assert_eq!(r.len(), 2 + 2 + 3);
        assert_eq!(r.points[2], pts[2]);
        assert_eq!(r.points[3], pts[13]);
    }

    #[test]
    fn cluster_of_nine_kept() {
        let pts: Vec<_> = (0..9)
            .map(|k| GpsPoint::new(8.6 + 1e-5 * k as f64, 41.15, 100 + k))
            .collect();
        let t = Trajectory::new("c", pts, None).unwrap();
        assert_eq!(reduce_redundancy(&t, &PreprocessConfig::default()).len(), 9);
    }

    #[test]
    fn straight_line_unchanged() {
        let t = line(25, 200.0, 15);
        assert_eq!(reduce_redundancy(&t, &PreprocessConfig::default()), t);
    }

    #[test]
    fn length_filter_boundaries() {
        let cfg = PreprocessConfig {
            min_level3_len: 1,
            ..Default::default()
        };
        let p = PrecisionLevels::default();
        let short = line(2, 900.0, 60);
        let long = line(2, 1100.0, 60);
        assert!(filter_trajectories(vec![short], &cfg, p).is_empty());
        assert_eq!(filter_trajectories(vec![long], &cfg, p).len(), 1);

        let mut exact = line(2, 1000.0, 60);
        let len = exact.path_length();
        // Nudge the endpoint so the path is exactly 1000 m up to rounding.
        exact.points[1].lon = 8.6 + (exact.points[1].lon - 8.6) * 1000.0 / len;
        let exact_len = exact.path_length();
        let cfg_exact = PreprocessConfig {
            min_length: exact_len,
            ..cfg
        };
        assert_eq!(filter_trajectories(vec![exact], &cfg_exact, p).len(), 1);
    }

    #[test]
    fn single_coarse_cell_dropped() {
        let cfg = PreprocessConfig {
            min_length: 1.0,
            ..Default::default()
        };
        let pts: Vec<_> = (0..5)
            .map(|k| GpsPoint::new(8.611 + 0.0005 * k as f64, 41.141, 100 + 15 * k))
            .collect();
        let t = Trajectory::new("c", pts, None).unwrap();
        assert!(filter_trajectories(vec![t], &cfg, PrecisionLevels::default()).is_empty());
    }
}
