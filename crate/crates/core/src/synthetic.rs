//! Synthetic data: a ray-cast box world for whole-pipeline runs and a
//! structured feature scene for registration tests.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{Feature, FeatureSet};
use crate::geometry::PoseSE3;
use crate::ingest::{
    encode_kitti_records, format_trajectory, uniform_elevations, LidarPoint, SensorConfig, Trajectory,
    TrajectoryFormat,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            min: Vector3::from(min),
            max: Vector3::from(max),
        }
    }

    /// Entry and exit ray parameters, if the ray's line meets the box.
    fn slab(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (lo, hi) = {
                let u = (self.min[a] - origin[a]) * inv;
                let v = (self.max[a] - origin[a]) * inv;
                if u < v {
                    (u, v)
                } else {
                    (v, u)
                }
            };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// A closed room with solid box obstacles.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxWorld {
    pub room: Aabb,
    pub obstacles: Vec<Aabb>,
}

impl BoxWorld {
    /// 32 m square hall with pillars and crates placed off a radius-8 loop.
    pub fn hall() -> Self {
        let pillar = |x: f64, y: f64, half: f64| Aabb::new([x - half, y - half, -1.8], [x + half, y + half, 3.5]);
        Self {
            room: Aabb::new([-16.0, -16.0, -1.8], [16.0, 16.0, 3.5]),
            obstacles: vec![
                pillar(0.0, 0.0, 0.6),
                pillar(12.0, 0.5, 0.5),
                pillar(-12.0, 4.0, 0.7),
                pillar(4.0, 12.0, 0.5),
                pillar(-5.0, -12.5, 0.6),
                pillar(11.0, -11.0, 0.8),
                Aabb::new([2.0, 3.0, -1.8], [3.5, 4.0, -0.6]),
                Aabb::new([-4.0, -3.5, -1.8], [-2.5, -2.0, 0.2]),
                Aabb::new([-13.0, -9.0, -1.8], [-10.5, -7.5, -0.3]),
            ],
        }
    }

    /// Distance along the unit `dir` to the first surface.
    pub fn ray_cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut best = self.room.slab(origin, dir).map(|(_, t1)| t1).filter(|&t| t > 0.0);
        for b in &self.obstacles {
            if let Some((t0, _)) = b.slab(origin, dir) {
                if t0 > 0.0 && best.is_none_or(|t| t0 < t) {
                    best = Some(t0);
                }
            }
        }
        best
    }
}

/// Spinning multi-beam sensor model.
#[derive(Debug, Clone, PartialEq)]
pub struct SimLidar {
    pub elevations_deg: Vec<f64>,
    /// Firings per revolution.
    pub columns: usize,
    pub clockwise: bool,
    /// Azimuth of the first firing, radians.
    pub start_azimuth: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for SimLidar {
    fn default() -> Self {
        Self {
            elevations_deg: uniform_elevations(32, -22.0, 8.0),
            columns: 900,
            clockwise: true,
            start_azimuth: PI,
            min_range: 1.0,
            max_range: 80.0,
        }
    }
}

impl SimLidar {
    /// Ingest settings that recover this sensor's channels.
    pub fn sensor_config(&self) -> SensorConfig {
        SensorConfig {
            elevations_deg: self.elevations_deg.clone(),
            min_range: self.min_range,
            max_range: self.max_range,
            clockwise: self.clockwise,
            ..SensorConfig::default()
        }
    }
}

/// Casts one revolution while the sensor moves uniformly from `start` to
/// `end` (world frame). Each record is expressed in the sensor frame at its
/// own firing time, ordered by firing time.
pub fn simulate_sweep(
    world: &BoxWorld,
    lidar: &SimLidar,
    start: &PoseSE3,
    end: &PoseSE3,
    range_noise: f64,
    rng: &mut impl Rng,
) -> Vec<[f32; 4]> {
    let motion = start.between(end);
    let noise = Normal::new(0.0, range_noise.max(0.0)).expect("finite standard deviation");
    let dirs: Vec<(f64, f64)> = lidar
        .elevations_deg
        .iter()
        .map(|e| (e.to_radians().cos(), e.to_radians().sin()))
        .collect();
    let mut out = Vec::with_capacity(lidar.columns * dirs.len());
    for col in 0..lidar.columns {
        let s = col as f64 / lidar.columns as f64;
        let sign = if lidar.clockwise { -1.0 } else { 1.0 };
        let az = lidar.start_azimuth + sign * TAU * s;
        let pose = start.compose(&motion.interpolate_from_identity(s));
        for &(ce, se) in &dirs {
            let local = Vector3::new(ce * az.cos(), ce * az.sin(), se);
            let Some(range) = world.ray_cast(&pose.translation, &pose.transform_vector(&local)) else {
                continue;
            };
            let r = range + if range_noise > 0.0 { noise.sample(rng) } else { 0.0 };
            if r < lidar.min_range || r > lidar.max_range {
                continue;
            }
            let p = local * r;
            out.push([p.x as f32, p.y as f32, p.z as f32, 0.5]);
        }
    }
    out
}

/// Circular drive, one full lap over the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopParams {
    pub frames: usize,
    pub radius: f64,
    pub range_noise: f64,
    pub seed: u64,
    pub scan_period: f64,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            frames: 50,
            radius: 8.0,
            range_noise: 0.01,
            seed: 7,
            scan_period: 0.1,
        }
    }
}

impl LoopParams {
    /// World pose at fractional frame `f`: heading tangent to the circle.
    pub fn pose_at(&self, f: f64) -> PoseSE3 {
        let theta = TAU * f / self.frames as f64;
        PoseSE3::from_axis_angle(
            Vector3::new(0.0, 0.0, theta + PI / 2.0),
            Vector3::new(self.radius * theta.cos(), self.radius * theta.sin(), 0.0),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub scans: Vec<Vec<[f32; 4]>>,
    pub timestamps: Vec<f64>,
    /// Sweep-end poses, relative to the first one.
    pub truth: Vec<PoseSE3>,
    pub sensor: SensorConfig,
}

impl SyntheticSequence {
    pub fn truth_trajectory(&self) -> Trajectory {
        let mut t = Trajectory::new();
        for (ts, p) in self.timestamps.iter().zip(&self.truth) {
            t.push(*ts, *p).expect("timestamps increase");
        }
        t
    }

    /// Writes a KITTI-style sequence directory: `velodyne/NNNNNN.bin`,
    /// `times.txt` and `poses.txt`.
    pub fn write_dataset(&self, dir: &Path) -> Result<()> {
        let velo = dir.join("velodyne");
        fs::create_dir_all(&velo).map_err(|e| Error::io(&velo, e))?;
        for (i, recs) in self.scans.iter().enumerate() {
            let path = velo.join(format!("{i:06}.bin"));
            fs::write(&path, encode_kitti_records(recs)).map_err(|e| Error::io(&path, e))?;
        }
        let times: String = self.timestamps.iter().map(|t| format!("{t}\n")).collect();
        let path = dir.join("times.txt");
        fs::write(&path, times).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("poses.txt");
        fs::write(&path, format_trajectory(&self.truth_trajectory(), TrajectoryFormat::Kitti))
            .map_err(|e| Error::io(&path, e))
    }
}

/// Simulates the lap in the default hall with the default sensor.
pub fn simulate_loop(params: &LoopParams) -> SyntheticSequence {
    simulate_loop_in(&BoxWorld::hall(), &SimLidar::default(), params)
}

pub fn simulate_loop_in(world: &BoxWorld, lidar: &SimLidar, params: &LoopParams) -> SyntheticSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let origin_inv = params.pose_at(0.0).inverse();
    let mut seq = SyntheticSequence {
        scans: Vec::with_capacity(params.frames),
        timestamps: Vec::with_capacity(params.frames),
        truth: Vec::with_capacity(params.frames),
        sensor: lidar.sensor_config(),
    };
    seq.sensor.scan_period = params.scan_period;
    for k in 0..params.frames {
        let end = params.pose_at(k as f64);
        let start = params.pose_at(k as f64 - 1.0);
        seq.scans.push(simulate_sweep(world, lidar, &start, &end, params.range_noise, &mut rng));
        seq.timestamps.push(k as f64 * params.scan_period);
        seq.truth.push(origin_inv.compose(&end));
    }
    seq
}

/// Feature-level scene for registration tests: two walls, a floor and three
/// vertical edges, sampled on horizontal rings that stand in for beam
/// channels. Everything lies within [`structured_bounds`].
pub fn structured_features() -> FeatureSet {
    let mut fs = FeatureSet::default();
    let wall_channels = 16u16;
    let feature = |p: Vector3<f64>, channel: u16, subregion: u16, smoothness: f64| Feature {
        point: LidarPoint::new(p, channel, 0.0),
        subregion,
        smoothness,
    };
    for c in 0..wall_channels {
        let z = -1.2 + 0.25 * c as f64;
        let stagger = if c % 2 == 0 { 0.0 } else { 0.35 };
        // Wall x = 12, y from -12 to 8.
        for i in 0..21 {
            let p = Vector3::new(12.0, -12.0 + i as f64 + stagger, z);
            fs.planars.push(feature(p, c, (i / 7) as u16, 0.01));
        }
        // Wall y = 16, x from -10 to 6.
        for i in 0..17 {
            let p = Vector3::new(-10.0 + i as f64 + stagger, 16.0, z);
            fs.planars.push(feature(p, c, 3 + (i / 6) as u16, 0.01));
        }
        for (e, &(x, y)) in [(6.0, -8.0), (-8.0, 9.0), (-2.0, -11.0)].iter().enumerate() {
            fs.edges.push(feature(Vector3::new(x, y, z), c, e as u16, 0.5));
        }
    }
    // Floor rings at z = -1.6 on their own channel ids.
    for ring in 0..6u16 {
        let radius = 4.0 + ring as f64;
        for i in 0..24 {
            let a = TAU * (i as f64 + 0.5 * (ring % 2) as f64) / 24.0;
            let p = Vector3::new(radius * a.cos(), radius * a.sin(), -1.6);
            fs.planars.push(feature(p, wall_channels + ring, (i / 4) as u16, 0.02));
        }
    }
    fs
}

/// Box enclosing [`structured_features`] with a 1 m margin.
pub fn structured_bounds() -> Aabb {
    Aabb::new([-11.0, -13.0, -2.6], [13.0, 17.0, 3.55])
}

/// Adds isotropic Gaussian noise with standard deviation `sigma` per axis.
pub fn add_noise(fs: &FeatureSet, sigma: f64, rng: &mut impl Rng) -> FeatureSet {
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite standard deviation");
    let mut out = fs.clone();
    for f in out.edges.iter_mut().chain(out.planars.iter_mut()) {
        f.point.position += Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
    }
    out
}

/// Appends `fraction` as many outliers as there are features of each kind,
/// placed uniformly in `region` with random channel and subregion ids.
pub fn add_outliers(fs: &FeatureSet, fraction: f64, region: &Aabb, rng: &mut impl Rng) -> FeatureSet {
    let mut out = fs.clone();
    let max_channel = fs.edges.iter().chain(&fs.planars).map(Feature::channel).max().unwrap_or(0);
    let max_sub = fs.edges.iter().chain(&fs.planars).map(|f| f.subregion).max().unwrap_or(0);
    for list in [&mut out.edges, &mut out.planars] {
        let count = (fraction * list.len() as f64).round() as usize;
        for _ in 0..count {
            let p = Vector3::new(
                rng.random_range(region.min.x..=region.max.x),
                rng.random_range(region.min.y..=region.max.y),
                rng.random_range(region.min.z..=region.max.z),
            );
            list.push(Feature {
                point: LidarPoint::new(p, rng.random_range(0..=max_channel), 0.0),
                subregion: rng.random_range(0..=max_sub),
                smoothness: 0.0,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::scan_from_records;

    #[test]
    fn ray_hits_room_wall() {
        let w = BoxWorld {
            room: Aabb::new([-10.0, -10.0, -2.0], [10.0, 10.0, 3.0]),
            obstacles: vec![],
        };
        let d = w.ray_cast(&Vector3::zeros(), &Vector3::x()).unwrap();
        assert!((d - 10.0).abs() < 1e-12);
    }

    #[test]
    fn obstacle_occludes_wall() {
        let w = BoxWorld {
            room: Aabb::new([-10.0, -10.0, -2.0], [10.0, 10.0, 3.0]),
            obstacles: vec![Aabb::new([4.0, -1.0, -2.0], [5.0, 1.0, 3.0])],
        };
        assert!((w.ray_cast(&Vector3::zeros(), &Vector3::x()).unwrap() - 4.0).abs() < 1e-12);
        assert!((w.ray_cast(&Vector3::zeros(), &-Vector3::x()).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn static_sweep_ingests_every_return() {
        let lidar = SimLidar {
            columns: 360,
            ..SimLidar::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = PoseSE3::identity();
        let recs = simulate_sweep(&BoxWorld::hall(), &lidar, &pose, &pose, 0.0, &mut rng);
        let (scan, stats) = scan_from_records(&recs, &lidar.sensor_config(), 0, 0.0);
        assert_eq!(stats.retained, recs.len());
        assert!(scan.channels.iter().all(|c| !c.is_empty()));
        // Capture order equals sweep order.
        let first = &scan.channels[0];
        assert!(first.windows(2).all(|w| w[0].rel_time <= w[1].rel_time));
        assert!(first.last().unwrap().rel_time > 0.95);
    }

    #[test]
    fn loop_truth_starts_at_identity() {
        let p = LoopParams {
            frames: 4,
            ..Default::default()
        };
        let lidar = SimLidar {
            columns: 90,
            ..SimLidar::default()
        };
        let seq = simulate_loop_in(&BoxWorld::hall(), &lidar, &p);
        assert_eq!(seq.scans.len(), 4);
        assert!(seq.truth[0].translation_norm() < 1e-12 && seq.truth[0].rotation_angle() < 1e-12);
        let step = seq.truth[0].between(&seq.truth[1]);
        assert!((step.rotation_angle() - TAU / 4.0).abs() < 1e-9);
    }

    #[test]
    fn outlier_count_follows_fraction() {
        let fs = structured_features();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = add_outliers(&fs, 0.3, &Aabb::new([-10.0; 3], [10.0; 3]), &mut rng);
        assert_eq!(out.edges.len() - fs.edges.len(), (0.3 * fs.edges.len() as f64).round() as usize);
        assert_eq!(out.planars.len() - fs.planars.len(), (0.3 * fs.planars.len() as f64).round() as usize);
    }
}
