//! One trajectory per line:
//! `{"id": "a", "points": [[lon, lat, t], ...], "label": 1}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GpsPoint, Trajectory};

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<i64>,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub trajectories: Vec<Trajectory>,
    /// `(line number, reason)` of every skipped line.
    pub skipped: Vec<(usize, String)>,
}

fn parse_line(line: &str) -> std::result::Result<Trajectory, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let mut points = Vec::with_capacity(rec.points.len());
    for [lon, lat, t] in rec.points {
        if !t.is_finite() || t.fract() != 0.0 || t.abs() > 1e15 {
            return Err(format!("timestamp {t} is not a whole number of seconds"));
        }
        points.push(GpsPoint::new(lon, lat, t as i64));
    }
    Trajectory::new(rec.id, points, rec.label).map_err(|e| e.to_string())
}

/// Parse JSONL from a reader. Blank lines are ignored. With `strict`, the
/// first bad line is an error; otherwise bad lines are skipped and listed.
pub fn parse_jsonl<R: BufRead>(reader: R, strict: bool) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::BadLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line) {
            Ok(t) => report.trajectories.push(t),
            Err(reason) if strict => return Err(Error::BadLine { line: line_no, reason }),
            Err(reason) => {
                log::warn!("skipping line {line_no}: {reason}");
                report.skipped.push((line_no, reason));
            }
        }
    }
    Ok(report)
}

pub fn load_jsonl(path: &Path, strict: bool) -> Result<LoadReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let report = parse_jsonl(BufReader::new(file), strict)?;
    if report.trajectories.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    Ok(report)
}

pub fn write_jsonl(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        let rec = Record {
            id: t.id.clone(),
            points: t.points.iter().map(|p| [p.lon, p.lat, p.t as f64]).collect(),
            label: t.label,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
