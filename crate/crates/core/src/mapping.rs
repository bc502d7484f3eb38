//! Scan-to-map refinement against voxel-downsampled edge and planar maps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSet};
use crate::geometry::{lm_solve, PoseSE3, ResidualBlock, SolveReport, SolverOptions};
use crate::matching::{filter_by_subgraphs, Correspondence, FilteredMatches, GraphParams, KdTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapParams {
    pub edge_voxel: f64,
    pub planar_voxel: f64,
    /// Points farther than this from the current pose are evicted.
    pub radius: f64,
    /// Neighborhood size for centroid matching.
    pub neighbors: usize,
    /// A feature is dropped when any of its neighbors is farther than this.
    pub max_neighbor_dist: f64,
    /// A neighborhood whose points stray farther than this from the line or
    /// plane through its anchors is degenerate and yields no residual.
    pub fit_tolerance: f64,
    pub graph: GraphParams,
    pub graph_filter: bool,
    pub lm_iterations: usize,
}

impl Default for MapParams {
    fn default() -> Self {
        Self {
            edge_voxel: 0.2,
            planar_voxel: 0.4,
            radius: 100.0,
            neighbors: 5,
            max_neighbor_dist: 2.0,
            fit_tolerance: 0.05,
            graph: GraphParams::mapping(),
            graph_filter: true,
            lm_iterations: 4,
        }
    }
}

/// Point set holding at most one point per voxel. The first point to land in
/// a voxel is kept, so re-inserting the same cloud changes nothing.
#[derive(Debug, Clone)]
pub struct VoxelCloud {
    leaf: f64,
    cells: HashMap<[i64; 3], usize>,
    points: Vec<Vector3<f64>>,
    tree: Option<KdTree>,
}

impl VoxelCloud {
    pub fn new(leaf: f64) -> Self {
        Self {
            leaf,
            cells: HashMap::new(),
            points: Vec::new(),
            tree: None,
        }
    }

    pub fn voxel_of(&self, p: &Vector3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a] / self.leaf).floor() as i64)
    }

    pub fn leaf(&self) -> f64 {
        self.leaf
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn insert(&mut self, p: Vector3<f64>) -> bool {
        let key = self.voxel_of(&p);
        if self.cells.contains_key(&key) {
            return false;
        }
        self.cells.insert(key, self.points.len());
        self.points.push(p);
        self.tree = None;
        true
    }

    /// Drops points farther than `radius` from `center`.
    pub fn evict_outside(&mut self, center: &Vector3<f64>, radius: f64) {
        let before = self.points.len();
        self.points.retain(|p| (p - center).norm() <= radius);
        if self.points.len() != before {
            self.cells = self
                .points
                .iter()
                .enumerate()
                .map(|(i, p)| ([0, 1, 2].map(|a| (p[a] / self.leaf).floor() as i64), i))
                .collect();
            self.tree = None;
        }
    }

    fn ensure_tree(&mut self) {
        if self.tree.is_none() && !self.points.is_empty() {
            self.tree = KdTree::build(self.points.clone()).ok();
        }
    }

    pub fn tree(&self) -> Option<&KdTree> {
        self.tree.as_ref()
    }
}

/// World-frame edge and planar maps around the current pose.
#[derive(Debug, Clone)]
pub struct LocalFeatureMap {
    pub edges: VoxelCloud,
    pub planars: VoxelCloud,
    pub radius: f64,
    /// Pose of the most recent integration; eviction is centred here.
    pub origin: PoseSE3,
}

impl LocalFeatureMap {
    pub fn new(params: &MapParams) -> Self {
        Self {
            edges: VoxelCloud::new(params.edge_voxel),
            planars: VoxelCloud::new(params.planar_voxel),
            radius: params.radius,
            origin: PoseSE3::identity(),
        }
    }

    pub fn cloud(&self, kind: FeatureKind) -> &VoxelCloud {
        match kind {
            FeatureKind::Edge => &self.edges,
            FeatureKind::Planar => &self.planars,
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len() + self.planars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts `features` transformed by `pose`, then evicts everything
    /// outside the radius around `pose`.
    pub fn integrate(&mut self, features: &FeatureSet, pose: &PoseSE3) {
        for f in &features.edges {
            self.edges.insert(pose.transform_point(&f.point.position));
        }
        for f in &features.planars {
            self.planars.insert(pose.transform_point(&f.point.position));
        }
        self.edges.evict_outside(&pose.translation, self.radius);
        self.planars.evict_outside(&pose.translation, self.radius);
        self.edges.ensure_tree();
        self.planars.ensure_tree();
        self.origin = *pose;
    }

    /// Writes `edges.xyz` and `planars.xyz` into `dir`, one `x y z` per line.
    pub fn export_xyz(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, cloud) in [("edges.xyz", &self.edges), ("planars.xyz", &self.planars)] {
            let path = dir.join(name);
            fs::write(&path, format_xyz(cloud.points())).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn format_xyz(points: &[Vector3<f64>]) -> String {
    let mut s = String::with_capacity(points.len() * 32);
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MapMatches {
    /// Targets are neighborhood centroids; `target_index` points into
    /// `neighborhoods`.
    pub correspondences: Vec<Correspondence>,
    pub neighborhoods: Vec<Vec<Vector3<f64>>>,
    /// Features without a full neighborhood within range.
    pub dropped: usize,
}

/// Pairs each feature, projected by `guess`, with the centroid of its nearest
/// map points of the same kind.
pub fn map_correspondences(features: &FeatureSet, map: &LocalFeatureMap, guess: &PoseSE3, params: &MapParams) -> MapMatches {
    let mut out = MapMatches::default();
    for kind in [FeatureKind::Edge, FeatureKind::Planar] {
        let src = features.of_kind(kind);
        let Some(tree) = map.cloud(kind).tree() else {
            out.dropped += src.len();
            continue;
        };
        for (i, f) in src.iter().enumerate() {
            let q = guess.transform_point(&f.point.position);
            let nb = tree.knn_within(&q, params.neighbors, params.max_neighbor_dist);
            if nb.len() < params.neighbors || nb.is_empty() {
                out.dropped += 1;
                continue;
            }
            let pts: Vec<Vector3<f64>> = nb.iter().map(|n| n.point).collect();
            let centroid = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            out.correspondences.push(Correspondence {
                source: f.point,
                target: centroid,
                kind,
                subregion_id: f.subregion as u32,
                source_index: i,
                target_index: Some(out.neighborhoods.len()),
            });
            out.neighborhoods.push(pts);
        }
    }
    out
}

/// The two neighborhood points farthest apart; ties keep the earliest pair.
pub fn line_anchors(pts: &[Vector3<f64>]) -> Option<[Vector3<f64>; 2]> {
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = (pts[i] - pts[j]).norm_squared();
            if best.is_none_or(|(bd, _, _)| d > bd) {
                best = Some((d, i, j));
            }
        }
    }
    best.map(|(_, i, j)| [pts[i], pts[j]])
}

/// The three neighborhood points spanning the largest triangle.
pub fn plane_anchors(pts: &[Vector3<f64>]) -> Option<[Vector3<f64>; 3]> {
    let mut best: Option<(f64, [usize; 3])> = None;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let area = (pts[j] - pts[i]).cross(&(pts[k] - pts[i])).norm_squared();
                if best.is_none_or(|(ba, _)| area > ba) {
                    best = Some((area, [i, j, k]));
                }
            }
        }
    }
    best.map(|(_, [i, j, k])| [pts[i], pts[j], pts[k]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingResult {
    pub pose: PoseSE3,
    pub initial: usize,
    pub unmatched: usize,
    pub kept: usize,
    pub removed: usize,
    pub histogram: [usize; 10],
    pub blocks: usize,
    pub dropped_blocks: usize,
    pub solve: Option<SolveReport>,
    /// Why the guess was returned unrefined, if it was.
    pub degraded: Option<String>,
}

/// Largest distance from a neighborhood point to the primitive through the
/// block's anchors.
pub fn fit_deviation(block: &ResidualBlock, pts: &[Vector3<f64>]) -> f64 {
    let identity = PoseSE3::identity();
    pts.iter()
        .map(|p| block.with_source(*p).evaluate(&identity).abs())
        .fold(0.0, f64::max)
}

/// Unweighted residual blocks from kept map correspondences.
pub fn map_residuals(
    matches: &FilteredMatches,
    neighborhoods: &[Vec<Vector3<f64>>],
    fit_tolerance: f64,
) -> (Vec<ResidualBlock>, usize) {
    let mut blocks = Vec::with_capacity(matches.kept.len());
    let mut dropped = 0;
    for c in &matches.kept {
        let pts = c.target_index.and_then(|i| neighborhoods.get(i));
        let block = pts.and_then(|pts| match c.kind {
            FeatureKind::Edge => line_anchors(pts)
                .and_then(|[a, b]| ResidualBlock::point_to_line(c.source.position, a, b, 1.0).ok()),
            FeatureKind::Planar => plane_anchors(pts)
                .and_then(|[a, b, d]| ResidualBlock::point_to_plane(c.source.position, a, b, d, 1.0).ok()),
        })
        .filter(|b| pts.is_some_and(|pts| fit_deviation(b, pts) <= fit_tolerance));
        match block {
            Some(b) => blocks.push(b),
            None => dropped += 1,
        }
    }
    (blocks, dropped)
}

/// One association pass and a short solve starting from `guess`.
pub fn refine_pose(features: &FeatureSet, map: &LocalFeatureMap, guess: PoseSE3, params: &MapParams) -> MappingResult {
    let matches = map_correspondences(features, map, &guess, params);
    let initial = matches.correspondences.len();
    let filtered = if params.graph_filter {
        filter_by_subgraphs(matches.correspondences, &params.graph)
    } else {
        FilteredMatches::unfiltered(matches.correspondences)
    };
    let (blocks, dropped_blocks) = map_residuals(&filtered, &matches.neighborhoods, params.fit_tolerance);
    let mut result = MappingResult {
        pose: guess,
        initial,
        unmatched: matches.dropped,
        kept: filtered.kept.len(),
        removed: filtered.removed,
        histogram: filtered.histogram,
        blocks: blocks.len(),
        dropped_blocks,
        solve: None,
        degraded: None,
    };
    let opts = SolverOptions::default().with_max_iterations(params.lm_iterations);
    match lm_solve(&blocks, guess, &opts) {
        Ok((pose, report)) => {
            result.pose = pose;
            result.solve = Some(report);
        }
        Err(e) => result.degraded = Some(e.to_string()),
    }
    result
}

/// Sequential mapping stage: predicts each map pose from the odometry
/// increment, refines it, then grows the map.
#[derive(Debug)]
pub struct Mapper {
    params: MapParams,
    map: LocalFeatureMap,
    last: Option<(PoseSE3, PoseSE3)>,
}

impl Mapper {
    pub fn new(params: MapParams) -> Self {
        Self {
            map: LocalFeatureMap::new(&params),
            params,
            last: None,
        }
    }

    pub fn map(&self) -> &LocalFeatureMap {
        &self.map
    }

    pub fn into_map(self) -> LocalFeatureMap {
        self.map
    }

    /// `odom` is this frame's odometry pose; returns the refined map pose.
    pub fn process(&mut self, features: &FeatureSet, odom: PoseSE3) -> MappingResult {
        let guess = match self.last {
            Some((map_prev, odom_prev)) => map_prev.compose(&odom_prev.inverse()).compose(&odom),
            None => odom,
        };
        let result = if self.map.is_empty() {
            MappingResult {
                pose: guess,
                initial: 0,
                unmatched: features.len(),
                kept: 0,
                removed: 0,
                histogram: [0; 10],
                blocks: 0,
                dropped_blocks: 0,
                solve: None,
                degraded: self.last.map(|_| "empty map".to_string()),
            }
        } else {
            refine_pose(features, &self.map, guess, &self.params)
        };
        self.map.integrate(features, &result.pose);
        self.last = Some((result.pose, odom));
        result
    }
}
