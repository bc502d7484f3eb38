//! Scan and trajectory I/O.
//!
//! KITTI velodyne files are packed little-endian `f32` quadruples
//! `(x, y, z, intensity)` with no ring index, so each return's beam channel is
//! recovered from its elevation angle against the sensor's beam table, and its
//! time within the sweep from its azimuth.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;

/// One LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub position: Vector3<f64>,
    pub intensity: f32,
    pub channel: u16,
    /// Fraction of the sweep period elapsed when the return was captured, in `[0, 1)`.
    pub rel_time: f64,
}

impl LidarPoint {
    pub fn new(position: Vector3<f64>, channel: u16, rel_time: f64) -> Self {
        Self {
            position,
            intensity: 0.0,
            channel,
            rel_time,
        }
    }

    pub fn range(&self) -> f64 {
        self.position.norm()
    }
}

/// One sweep, grouped by beam channel; each channel is ordered by capture time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scan {
    pub channels: Vec<Vec<LidarPoint>>,
    pub scan_index: usize,
    pub timestamp: f64,
}

impl Scan {
    pub fn new(channel_count: usize, scan_index: usize, timestamp: f64) -> Self {
        Self {
            channels: vec![Vec::new(); channel_count],
            scan_index,
            timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.channels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> impl Iterator<Item = &LidarPoint> {
        self.channels.iter().flatten()
    }

    /// Sorts each channel by capture time (stable, so equal times keep file order).
    pub fn sort_channels(&mut self) {
        for ch in &mut self.channels {
            ch.sort_by(|a, b| a.rel_time.total_cmp(&b.rel_time));
        }
    }
}

/// Beam geometry and range gates of the sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// Elevation of each beam in degrees; the index is the channel id.
    pub elevations_deg: Vec<f64>,
    pub elevation_tolerance_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Whether the head sweeps clockwise seen from above (azimuth decreasing).
    pub clockwise: bool,
    /// Sweep period in seconds, used for timestamps when none are supplied.
    pub scan_period: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            elevations_deg: hdl64_elevations(),
            elevation_tolerance_deg: 0.2,
            min_range: 1.0,
            max_range: 120.0,
            clockwise: true,
            scan_period: 0.1,
        }
    }
}

/// Approximate HDL-64E beam table used with KITTI: 32 upper beams from +2°
/// in 1/3° steps, then 32 lower beams from −8.83° in 0.5° steps.
pub fn hdl64_elevations() -> Vec<f64> {
    let upper = (0..32).map(|i| 2.0 - i as f64 / 3.0);
    let lower = (0..32).map(|i| -8.83 - i as f64 * 0.5);
    upper.chain(lower).collect()
}

/// Evenly spaced beam table from `min_deg` to `max_deg`, top beam first.
pub fn uniform_elevations(channels: usize, min_deg: f64, max_deg: f64) -> Vec<f64> {
    if channels == 1 {
        return vec![max_deg];
    }
    let step = (max_deg - min_deg) / (channels - 1) as f64;
    (0..channels).map(|i| max_deg - step * i as f64).collect()
}

impl SensorConfig {
    pub fn channel_count(&self) -> usize {
        self.elevations_deg.len()
    }

    /// Nearest beam within tolerance; ties go to the lower index.
    pub fn channel_for_elevation(&self, elevation_deg: f64) -> Option<u16> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.elevations_deg.iter().enumerate() {
            let d = (elevation_deg - e).abs();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.filter(|&(_, d)| d <= self.elevation_tolerance_deg)
            .map(|(i, _)| i as u16)
    }

    /// Fraction of a revolution swept from `start_azimuth` to `azimuth`, in `[0, 1)`.
    pub fn sweep_fraction(&self, start_azimuth: f64, azimuth: f64) -> f64 {
        let delta = if self.clockwise {
            start_azimuth - azimuth
        } else {
            azimuth - start_azimuth
        };
        let s = (delta / TAU).rem_euclid(1.0);
        if s >= 1.0 {
            0.0
        } else {
            s
        }
    }
}

pub fn elevation_deg(p: &Vector3<f64>) -> f64 {
    p.z.atan2(p.x.hypot(p.y)).to_degrees()
}

pub fn azimuth(p: &Vector3<f64>) -> f64 {
    p.y.atan2(p.x)
}

/// Counters for one ingested file. `retained + unknown_beam + out_of_range == records`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub records: usize,
    pub retained: usize,
    pub unknown_beam: usize,
    pub out_of_range: usize,
}

impl IngestStats {
    pub fn dropped(&self) -> usize {
        self.unknown_beam + self.out_of_range
    }
}

/// Decodes packed `(x, y, z, intensity)` little-endian records.
pub fn decode_kitti_records(bytes: &[u8], path: &Path) -> Result<Vec<[f32; 4]>> {
    if bytes.len() % 16 != 0 {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            reason: format!("length {} is not a multiple of 16 bytes", bytes.len()),
        });
    }
    bytes
        .chunks_exact(16)
        .enumerate()
        .map(|(i, rec)| {
            let mut out = [0f32; 4];
            for (k, v) in out.iter_mut().enumerate() {
                *v = f32::from_le_bytes(rec[k * 4..k * 4 + 4].try_into().unwrap());
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::MalformedFile {
                    path: path.to_path_buf(),
                    reason: format!("record {i} has a non-finite value"),
                });
            }
            Ok(out)
        })
        .collect()
}

pub fn encode_kitti_records(records: &[[f32; 4]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * 16);
    for rec in records {
        for v in rec {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Builds a [`Scan`] from raw records: assigns channels, sweep times, and
/// drops returns outside the range gates or the beam table.
pub fn scan_from_records(
    records: &[[f32; 4]],
    cfg: &SensorConfig,
    scan_index: usize,
    timestamp: f64,
) -> (Scan, IngestStats) {
    let mut scan = Scan::new(cfg.channel_count(), scan_index, timestamp);
    let mut stats = IngestStats {
        records: records.len(),
        ..Default::default()
    };
    let start_azimuth = records
        .first()
        .map(|r| azimuth(&Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64)))
        .unwrap_or(0.0);
    for rec in records {
        let p = Vector3::new(rec[0] as f64, rec[1] as f64, rec[2] as f64);
        let range = p.norm();
        if range < cfg.min_range || range > cfg.max_range {
            stats.out_of_range += 1;
            continue;
        }
        let Some(channel) = cfg.channel_for_elevation(elevation_deg(&p)) else {
            stats.unknown_beam += 1;
            continue;
        };
        let rel_time = cfg.sweep_fraction(start_azimuth, azimuth(&p));
        scan.channels[channel as usize].push(LidarPoint {
            position: p,
            intensity: rec[3],
            channel,
            rel_time,
        });
        stats.retained += 1;
    }
    scan.sort_channels();
    (scan, stats)
}

pub fn read_kitti_scan(
    path: &Path,
    cfg: &SensorConfig,
    scan_index: usize,
    timestamp: f64,
) -> Result<(Scan, IngestStats)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = decode_kitti_records(&bytes, path)?;
    Ok(scan_from_records(&records, cfg, scan_index, timestamp))
}

pub fn write_kitti_scan(path: &Path, records: &[[f32; 4]]) -> Result<()> {
    fs::write(path, encode_kitti_records(records)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: PoseSE3,
}

/// Time-indexed sequence of poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<TimedPose>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, timestamp: f64, pose: PoseSE3) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if timestamp <= last.timestamp {
                return Err(Error::Dataset(format!(
                    "trajectory timestamp {timestamp} does not follow {}",
                    last.timestamp
                )));
            }
        }
        self.entries.push(TimedPose { timestamp, pose });
        Ok(())
    }

    /// Uses the index as timestamp.
    pub fn from_poses(poses: impl IntoIterator<Item = PoseSE3>) -> Self {
        Self {
            entries: poses
                .into_iter()
                .enumerate()
                .map(|(i, pose)| TimedPose {
                    timestamp: i as f64,
                    pose,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TimedPose] {
        &self.entries
    }

    pub fn poses(&self) -> impl Iterator<Item = &PoseSE3> {
        self.entries.iter().map(|e| &e.pose)
    }

    pub fn last(&self) -> Option<&TimedPose> {
        self.entries.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryFormat {
    /// 12 numbers per line: the row-major top 3×4 of the homogeneous pose.
    Kitti,
    /// `timestamp tx ty tz qx qy qz qw` per line.
    Tum,
}

impl std::str::FromStr for TrajectoryFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kitti" => Ok(Self::Kitti),
            "tum" => Ok(Self::Tum),
            _ => Err(format!("unknown trajectory format '{s}' (expected kitti or tum)")),
        }
    }
}

/// Shortest round-tripping decimal, with negative zero printed as `0`.
fn fmt_num(out: &mut String, v: f64) {
    let v = if v == 0.0 { 0.0 } else { v };
    write!(out, "{v}").unwrap();
}

pub fn format_trajectory(traj: &Trajectory, format: TrajectoryFormat) -> String {
    let mut out = String::new();
    for e in traj.entries() {
        let mut values: Vec<f64> = Vec::with_capacity(12);
        match format {
            TrajectoryFormat::Kitti => {
                let m = e.pose.to_matrix();
                for r in 0..3 {
                    for c in 0..4 {
                        values.push(m[(r, c)]);
                    }
                }
            }
            TrajectoryFormat::Tum => {
                let t = e.pose.translation;
                let q = e.pose.rotation.quaternion();
                values.extend([e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w]);
            }
        }
        for (i, v) in values.into_iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            fmt_num(&mut out, v);
        }
        out.push('\n');
    }
    out
}

pub fn write_trajectory(traj: &Trajectory, format: TrajectoryFormat, path: &Path) -> Result<()> {
    fs::write(path, format_trajectory(traj, format)).map_err(|e| Error::io(path, e))
}

pub fn parse_trajectory(text: &str, format: TrajectoryFormat, path: &Path) -> Result<Trajectory> {
    let mut traj = Trajectory::new();
    let mut index = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("'{t}': {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        let (timestamp, pose) = match format {
            TrajectoryFormat::Kitti => {
                if values.len() != 12 {
                    return Err(parse_err(format!("expected 12 values, found {}", values.len())));
                }
                let r = Matrix3::new(
                    values[0], values[1], values[2], values[4], values[5], values[6], values[8],
                    values[9], values[10],
                );
                let t = Vector3::new(values[3], values[7], values[11]);
                (index as f64, PoseSE3::from_rotation_matrix(&r, t))
            }
            TrajectoryFormat::Tum => {
                if values.len() != 8 {
                    return Err(parse_err(format!("expected 8 values, found {}", values.len())));
                }
                let q = Quaternion::new(values[7], values[4], values[5], values[6]);
                if q.norm() < 1e-12 {
                    return Err(parse_err("zero quaternion".into()));
                }
                let pose = PoseSE3::new(
                    UnitQuaternion::from_quaternion(q),
                    Vector3::new(values[1], values[2], values[3]),
                );
                (values[0], pose)
            }
        };
        if !values.iter().all(|v| v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        traj.push(timestamp, pose)
            .map_err(|e| parse_err(e.to_string()))?;
        index += 1;
    }
    Ok(traj)
}

pub fn read_trajectory(path: &Path, format: TrajectoryFormat) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text, format, path)
}
