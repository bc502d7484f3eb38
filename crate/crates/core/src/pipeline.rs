//! Whole-sequence runner: pre-processing and odometry on one thread, mapping
//! on another, connected by a bounded queue.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{ate_rmse, Alignment, AteReport, Association};
use crate::features::{select_features, FeatureSet, SelectionParams};
use crate::geometry::PoseSE3;
use crate::ingest::{
    decode_kitti_records, parse_trajectory, scan_from_records, write_trajectory, IngestStats, SensorConfig,
    Trajectory, TrajectoryFormat,
};
use crate::mapping::{LocalFeatureMap, Mapper, MappingResult};
use crate::odometry::{deskew, Odometry, OdometryFrame};
use crate::synthetic::SyntheticSequence;

const QUEUE_DEPTH: usize = 4;

#[derive(Debug, Clone)]
pub enum ScanSource {
    Files(Vec<PathBuf>),
    Memory(Vec<Vec<[f32; 4]>>),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub source: ScanSource,
    pub timestamps: Vec<f64>,
    /// Ground truth re-expressed relative to the first processed frame.
    pub truth: Option<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn from_sequence(seq: &SyntheticSequence) -> Self {
        Self {
            source: ScanSource::Memory(seq.scans.clone()),
            timestamps: seq.timestamps.clone(),
            truth: Some(seq.truth_trajectory()),
        }
    }

    /// Opens a KITTI-style sequence directory as described by `cfg.dataset`.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let root = &cfg.dataset.path;
        if !root.is_dir() {
            return Err(Error::Dataset(format!("{} is not a directory", root.display())));
        }
        let velo = root.join("velodyne");
        let scan_dir = if velo.is_dir() { velo } else { root.clone() };
        let mut files: Vec<PathBuf> = fs::read_dir(&scan_dir)
            .map_err(|e| Error::io(&scan_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("no .bin scans in {}", scan_dir.display())));
        }
        let total = files.len();
        let first = cfg.dataset.first_frame;
        if first >= total {
            return Err(Error::Dataset(format!("first_frame {first} but only {total} scans")));
        }
        let end = cfg.dataset.max_frames.map_or(total, |m| (first + m).min(total));

        let times_path = root.join("times.txt");
        let all_times: Vec<f64> = if times_path.is_file() {
            let text = fs::read_to_string(&times_path).map_err(|e| Error::io(&times_path, e))?;
            let times = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    l.trim().parse::<f64>().map_err(|e| Error::Parse {
                        path: times_path.clone(),
                        line: i + 1,
                        reason: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if times.len() < total {
                return Err(Error::Dataset(format!(
                    "{} lists {} timestamps for {total} scans",
                    times_path.display(),
                    times.len()
                )));
            }
            times
        } else {
            (0..total).map(|i| i as f64 * cfg.sensor.scan_period).collect()
        };
        let timestamps = all_times[first..end].to_vec();
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Dataset("timestamps are not strictly increasing".into()));
        }

        let poses_path = cfg.dataset.poses.clone().or_else(|| {
            let p = root.join("poses.txt");
            p.is_file().then_some(p)
        });
        let truth = match poses_path {
            None => None,
            Some(p) => {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let all = parse_trajectory(&text, TrajectoryFormat::Kitti, &p)?;
                if all.len() < end {
                    return Err(Error::Dataset(format!("{} has {} poses for {end} scans", p.display(), all.len())));
                }
                let poses: Vec<PoseSE3> = all.poses().copied().collect();
                let origin = poses[first].inverse();
                let mut tr = Trajectory::new();
                for (ts, pose) in timestamps.iter().zip(&poses[first..end]) {
                    tr.push(*ts, origin.compose(pose))?;
                }
                Some(tr)
            }
        };
        Ok(Self {
            source: ScanSource::Files(files[first..end].to_vec()),
            timestamps,
            truth,
        })
    }

    fn records(&self, i: usize) -> Result<Vec<[f32; 4]>> {
        match &self.source {
            ScanSource::Memory(v) => Ok(v[i].clone()),
            ScanSource::Files(files) => {
                let path = &files[i];
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                decode_kitti_records(&bytes, path)
            }
        }
    }
}

/// Ingest, de-skew with the predicted sweep motion, and select features.
pub fn preprocess(
    records: &[[f32; 4]],
    sensor: &SensorConfig,
    selection: &SelectionParams,
    motion: &PoseSE3,
    index: usize,
    timestamp: f64,
) -> (FeatureSet, IngestStats) {
    let (scan, stats) = scan_from_records(records, sensor, index, timestamp);
    let scan = deskew(&scan, motion);
    (select_features(&scan, selection), stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub name: &'static str,
    pub samples_ms: Vec<f64>,
}

impl StageTiming {
    pub fn mean(&self) -> f64 {
        if self.samples_ms.is_empty() {
            return 0.0;
        }
        self.samples_ms.iter().sum::<f64>() / self.samples_ms.len() as f64
    }

    fn sorted(&self) -> Vec<f64> {
        let mut v = self.samples_ms.clone();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn median(&self) -> f64 {
        let v = self.sorted();
        match v.len() {
            0 => 0.0,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        }
    }

    /// Nearest-rank 95th percentile.
    pub fn p95(&self) -> f64 {
        let v = self.sorted();
        if v.is_empty() {
            return 0.0;
        }
        let rank = (0.95 * v.len() as f64).ceil() as usize;
        v[rank.clamp(1, v.len()) - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub stages: [StageTiming; 3],
}

impl TimingReport {
    fn new() -> Self {
        Self {
            stages: [
                StageTiming { name: "preprocessing", samples_ms: Vec::new() },
                StageTiming { name: "odometry", samples_ms: Vec::new() },
                StageTiming { name: "mapping", samples_ms: Vec::new() },
            ],
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<14} {:>10} {:>10} {:>10}\n", "stage", "mean_ms", "median_ms", "p95_ms");
        for st in &self.stages {
            let _ = writeln!(s, "{:<14} {:>10.3} {:>10.3} {:>10.3}", st.name, st.mean(), st.median(), st.p95());
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,mean_ms,median_ms,p95_ms\n");
        for st in &self.stages {
            let _ = writeln!(s, "{},{:.3},{:.3},{:.3}", st.name, st.mean(), st.median(), st.p95());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub ingest: IngestStats,
    pub edges: usize,
    pub planars: usize,
    pub odometry: OdometryFrame,
    pub mapping: Option<MappingResult>,
}

impl FrameRecord {
    pub fn diagnostics(&self) -> String {
        let o = &self.odometry;
        let mut s = format!(
            "frame {} t={} points {}/{} features edge={} planar={}\n",
            o.index, o.timestamp, self.ingest.retained, self.ingest.records, self.edges, self.planars
        );
        for (p, pass) in o.passes.iter().enumerate() {
            let _ = writeln!(
                s,
                "  odometry pass {p}: initial {} unmatched {} kept {} removed {} blocks {} dropped_blocks {} votes {:?}{}",
                pass.initial_matches,
                pass.unmatched,
                pass.kept,
                pass.removed,
                pass.blocks,
                pass.dropped_blocks,
                pass.histogram,
                pass.solve.as_ref().map_or(String::new(), |r| format!(
                    " cost {:.6e} -> {:.6e} iters {}",
                    r.initial_cost, r.final_cost, r.iterations
                )),
            );
        }
        if let Some(reason) = &o.degraded {
            let _ = writeln!(s, "  odometry degraded: {reason}");
        }
        if let Some(m) = &self.mapping {
            let _ = writeln!(
                s,
                "  mapping: initial {} unmatched {} kept {} removed {} blocks {} dropped_blocks {} votes {:?}{}",
                m.initial,
                m.unmatched,
                m.kept,
                m.removed,
                m.blocks,
                m.dropped_blocks,
                m.histogram,
                m.solve.as_ref().map_or(String::new(), |r| format!(
                    " cost {:.6e} -> {:.6e} iters {}",
                    r.initial_cost, r.final_cost, r.iterations
                )),
            );
            if let Some(reason) = &m.degraded {
                let _ = writeln!(s, "  mapping degraded: {reason}");
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct AteSummary {
    pub trajectory: &'static str,
    pub alignment: Alignment,
    pub report: AteReport,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub odometry: Trajectory,
    /// Mapping-refined poses; equal to `odometry` when mapping is disabled.
    pub mapped: Trajectory,
    pub frames: Vec<FrameRecord>,
    pub timing: TimingReport,
    pub map: Option<LocalFeatureMap>,
    pub ate: Vec<AteSummary>,
}

struct OdometryMessage {
    features: FeatureSet,
    ingest: IngestStats,
    frame: OdometryFrame,
    pre_ms: f64,
    odo_ms: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the full pipeline. `threads` sizes the pool used inside each stage.
pub fn run(cfg: &RunConfig, dataset: &Dataset, threads: Option<usize>) -> Result<RunOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("dataset has no frames".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let selection = cfg.selection();
    let odo_params = cfg.odometry_params();
    let map_params = cfg.map_params();
    let mapping_enabled = cfg.mapping.mapping_enabled;

    let (tx, rx) = sync_channel::<Result<OdometryMessage>>(QUEUE_DEPTH);
    // Stage loops run on their own threads and only enter the pool for
    // per-frame work, so a full queue never parks a pool worker.
    let (records_out, mapper) = std::thread::scope(|scope| {
        let pool = &pool;
        let producer = scope.spawn(move || {
            let mut odo = Odometry::new(odo_params);
            for (i, &ts) in dataset.timestamps.iter().enumerate() {
                let t0 = Instant::now();
                let records = match dataset.records(i) {
                    Ok(r) => r,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                };
                let motion = odo.predicted_motion();
                let (features, ingest) =
                    pool.install(|| preprocess(&records, &cfg.sensor, &selection, &motion, i, ts));
                let pre_ms = ms_since(t0);
                let t1 = Instant::now();
                let frame = pool.install(|| odo.process(features.clone(), ts));
                let odo_ms = ms_since(t1);
                if let Some(reason) = &frame.degraded {
                    log::warn!("frame {i}: odometry degraded: {reason}");
                }
                log::debug!("frame {i}: {} edge, {} planar features", features.edges.len(), features.planars.len());
                let msg = OdometryMessage { features, ingest, frame, pre_ms, odo_ms };
                if tx.send(Ok(msg)).is_err() {
                    return;
                }
            }
        });
        let consumer = scope.spawn(move || -> Result<(Vec<(FrameRecord, f64, f64, f64)>, Option<Mapper>)> {
            let mut mapper = mapping_enabled.then(|| Mapper::new(map_params));
            let mut out = Vec::new();
            for msg in rx {
                let msg = msg?;
                let t0 = Instant::now();
                let mapping = mapper
                    .as_mut()
                    .map(|m| pool.install(|| m.process(&msg.features, msg.frame.global)));
                let map_ms = if mapping.is_some() { ms_since(t0) } else { 0.0 };
                if let Some(reason) = mapping.as_ref().and_then(|m| m.degraded.as_ref()) {
                    log::warn!("frame {}: mapping degraded: {reason}", msg.frame.index);
                }
                let record = FrameRecord {
                    ingest: msg.ingest,
                    edges: msg.features.edges.len(),
                    planars: msg.features.planars.len(),
                    odometry: msg.frame,
                    mapping,
                };
                out.push((record, msg.pre_ms, msg.odo_ms, map_ms));
            }
            Ok((out, mapper))
        });
        producer.join().expect("odometry stage panicked");
        consumer.join().expect("mapping stage panicked")
    })?;

    let mut timing = TimingReport::new();
    let mut odometry = Trajectory::new();
    let mut mapped = Trajectory::new();
    let mut frames = Vec::with_capacity(records_out.len());
    for (rec, pre, odo, map) in records_out {
        timing.stages[0].samples_ms.push(pre);
        timing.stages[1].samples_ms.push(odo);
        if rec.mapping.is_some() {
            timing.stages[2].samples_ms.push(map);
        }
        let ts = rec.odometry.timestamp;
        odometry.push(ts, rec.odometry.global)?;
        mapped.push(ts, rec.mapping.as_ref().map_or(rec.odometry.global, |m| m.pose))?;
        frames.push(rec);
    }

    log::info!("processed {} frames", frames.len());
    let mut ate = Vec::new();
    if let Some(truth) = &dataset.truth {
        for (name, traj) in [("odometry", &odometry), ("mapped", &mapped)] {
            for alignment in [Alignment::None, Alignment::Rigid] {
                let report = ate_rmse(traj, truth, alignment, Association::ByIndex)?;
                ate.push(AteSummary { trajectory: name, alignment, report });
            }
        }
    }

    Ok(RunOutput {
        odometry,
        mapped,
        frames,
        timing,
        map: mapper.map(Mapper::into_map),
        ate,
    })
}

impl RunOutput {
    pub fn diagnostics(&self) -> String {
        self.frames.iter().map(FrameRecord::diagnostics).collect()
    }

    pub fn ate_text(&self) -> String {
        let mut s = String::new();
        for a in &self.ate {
            let align = match a.alignment {
                Alignment::None => "none",
                Alignment::Rigid => "rigid",
            };
            let _ = writeln!(
                s,
                "{:<9} align={:<5} rmse_m={:.6} matched={}",
                a.trajectory, align, a.report.rmse, a.report.matched
            );
        }
        s
    }

    /// Writes trajectories (both formats), timing, diagnostics, ATE when
    /// ground truth exists, and optionally the map.
    pub fn write(&self, dir: &Path, write_map: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (stem, traj) in [("trajectory", &self.mapped), ("odometry", &self.odometry)] {
            write_trajectory(traj, TrajectoryFormat::Kitti, &dir.join(format!("{stem}_kitti.txt")))?;
            write_trajectory(traj, TrajectoryFormat::Tum, &dir.join(format!("{stem}_tum.txt")))?;
        }
        let files = [
            ("timing.txt", self.timing.to_text()),
            ("timing.csv", self.timing.to_csv()),
            ("diagnostics.txt", self.diagnostics()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        if !self.ate.is_empty() {
            let path = dir.join("ate.txt");
            fs::write(&path, self.ate_text()).map_err(|e| Error::io(&path, e))?;
        }
        if let (true, Some(map)) = (write_map, &self.map) {
            map.export_xyz(&dir.join("map"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_statistics() {
        let st = StageTiming {
            name: "odometry",
            samples_ms: vec![5.0, 1.0, 3.0, 2.0, 4.0, 100.0],
        };
        assert!((st.mean() - 115.0 / 6.0).abs() < 1e-12);
        assert_eq!(st.median(), 3.5);
        assert_eq!(st.p95(), 100.0);
        let single = StageTiming { name: "x", samples_ms: vec![7.0] };
        assert_eq!((single.median(), single.p95()), (7.0, 7.0));
    }

    #[test]
    fn timing_table_has_three_rows() {
        let t = TimingReport::new();
        assert_eq!(t.to_text().lines().count(), 4);
        assert_eq!(t.to_csv().lines().count(), 4);
    }
}
