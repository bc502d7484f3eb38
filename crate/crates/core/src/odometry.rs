//! Scan-to-scan odometry guided by correspondence votes.
//!
//! Each outer pass re-associates the current features against the previous
//! scan, filters the pairs through the consistency graph, turns survivors into
//! point-to-line / point-to-plane residuals weighted by their vote rank, and
//! runs a few damped Gauss-Newton steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Feature, FeatureKind, FeatureSet};
use crate::geometry::{lm_solve, PoseSE3, ResidualBlock, SolveReport, SolverOptions};
use crate::ingest::Scan;
use crate::matching::{filter_by_subgraphs, initial_correspondences, FeatureIndex, FilteredMatches, GraphParams};

/// Re-expresses every point in the sweep-end frame.
///
/// `motion` is the sweep-end pose in the sweep-start frame. A point captured at
/// fraction `s` was seen from `motion` interpolated at `s` (slerp / lerp), so
/// its sweep-end position is `motion⁻¹ · motion(s) · p`.
pub fn deskew(scan: &Scan, motion: &PoseSE3) -> Scan {
    let inv = motion.inverse();
    map_points(scan, |p, s| inv.compose(&motion.interpolate_from_identity(s)).transform_point(p))
}

/// Inverse of [`deskew`]: moves sweep-end points back to their capture frames.
pub fn reskew(scan: &Scan, motion: &PoseSE3) -> Scan {
    map_points(scan, |p, s| {
        motion
            .interpolate_from_identity(s)
            .inverse()
            .compose(motion)
            .transform_point(p)
    })
}

fn map_points(scan: &Scan, f: impl Fn(&nalgebra::Vector3<f64>, f64) -> nalgebra::Vector3<f64>) -> Scan {
    let mut out = scan.clone();
    for ch in &mut out.channels {
        for p in ch.iter_mut() {
            p.position = f(&p.position, p.rel_time);
        }
    }
    out
}

/// Vote-rank weighting: the top `lambda_frac` of the kept correspondences get
/// `alpha·(o − o_min)/(o_max − o_min)`, the rest keep weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub lambda_frac: f64,
    pub alpha: f64,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        Self {
            lambda_frac: 0.2,
            alpha: 2.0,
        }
    }
}

impl WeightSchedule {
    /// Weights for votes already sorted in descending order. Rank `i`
    /// (0-based) is in the top set when `i < lambda_frac·N`; `o_min` and
    /// `o_max` range over all `N` votes.
    pub fn weights(&self, ordered_votes: &[u32]) -> Vec<f64> {
        let n = ordered_votes.len();
        let (Some(&o_max), Some(&o_min)) = (ordered_votes.iter().max(), ordered_votes.iter().min()) else {
            return Vec::new();
        };
        let top = self.lambda_frac * n as f64;
        ordered_votes
            .iter()
            .enumerate()
            .map(|(i, &o)| {
                if (i as f64) < top {
                    if o_max == o_min {
                        self.alpha
                    } else {
                        self.alpha * (o - o_min) as f64 / (o_max - o_min) as f64
                    }
                } else {
                    1.0
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorParams {
    /// Channels on either side searched for the cross-channel anchor.
    pub channel_window: u16,
    /// Maximum anchor distance from the projected source, meters.
    pub search_cap: f64,
}

impl Default for AnchorParams {
    fn default() -> Self {
        Self {
            channel_window: 2,
            search_cap: 10.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualSet {
    pub blocks: Vec<ResidualBlock>,
    /// Correspondences whose anchor search failed or gave degenerate anchors.
    pub dropped: usize,
}

/// Per-channel lookup of reference features.
#[derive(Debug, Clone)]
pub struct ChannelLookup {
    edges: Vec<Vec<usize>>,
    planars: Vec<Vec<usize>>,
}

impl ChannelLookup {
    pub fn new(features: &FeatureSet) -> Self {
        let group = |v: &[Feature]| {
            let max = v.iter().map(|f| f.channel() as usize + 1).max().unwrap_or(0);
            let mut out = vec![Vec::new(); max];
            for (i, f) in v.iter().enumerate() {
                out[f.channel() as usize].push(i);
            }
            out
        };
        Self {
            edges: group(&features.edges),
            planars: group(&features.planars),
        }
    }

    fn channel(&self, kind: FeatureKind, c: u16) -> &[usize] {
        let v = match kind {
            FeatureKind::Edge => &self.edges,
            FeatureKind::Planar => &self.planars,
        };
        v.get(c as usize).map_or(&[], Vec::as_slice)
    }

    /// Nearest feature to `q` among `channels`, excluding `skip`, within `cap`.
    fn nearest(
        &self,
        features: &[Feature],
        kind: FeatureKind,
        channels: impl Iterator<Item = u16>,
        q: &nalgebra::Vector3<f64>,
        skip: usize,
        cap: f64,
    ) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for c in channels {
            for &i in self.channel(kind, c) {
                if i == skip {
                    continue;
                }
                let d = (features[i].point.position - q).norm_squared();
                if d <= cap * cap && best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                    best = Some((d, i));
                }
            }
        }
        best.map(|(_, i)| i)
    }
}

fn neighbor_channels(c: u16, window: u16) -> impl Iterator<Item = u16> {
    let lo = c.saturating_sub(window);
    let hi = c.saturating_add(window);
    (lo..=hi).filter(move |&x| x != c)
}

/// Turns kept correspondences into residual blocks against the reference scan.
///
/// Edge: line through the matched target and the nearest edge from a nearby
/// different channel. Planar: plane through the matched target, the next
/// nearest planar in the target's channel, and the nearest planar from a
/// nearby different channel. `weights` aligns with `matches.kept`.
pub fn build_residuals(
    matches: &FilteredMatches,
    weights: &[f64],
    reference: &FeatureIndex,
    lookup: &ChannelLookup,
    pose: &PoseSE3,
    anchors: &AnchorParams,
) -> ResidualSet {
    let mut out = ResidualSet::default();
    for (c, &w) in matches.kept.iter().zip(weights) {
        let Some(ti) = c.target_index else {
            out.dropped += 1;
            continue;
        };
        let q = pose.transform_point(&c.source.position);
        let feats = reference.features.of_kind(c.kind);
        let channel = feats[ti].channel();
        let cross = || {
            lookup.nearest(
                feats,
                c.kind,
                neighbor_channels(channel, anchors.channel_window),
                &q,
                ti,
                anchors.search_cap,
            )
        };
        let block = match c.kind {
            FeatureKind::Edge => cross().and_then(|j| {
                ResidualBlock::point_to_line(c.source.position, c.target, feats[j].point.position, w).ok()
            }),
            FeatureKind::Planar => {
                let same = lookup.nearest(feats, c.kind, std::iter::once(channel), &q, ti, anchors.search_cap);
                same.zip(cross()).and_then(|(j, l)| {
                    ResidualBlock::point_to_plane(
                        c.source.position,
                        c.target,
                        feats[j].point.position,
                        feats[l].point.position,
                        w,
                    )
                    .ok()
                })
            }
        };
        match block {
            Some(b) => out.blocks.push(b),
            None => out.dropped += 1,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometryParams {
    pub graph: GraphParams,
    pub graph_filter: bool,
    pub weighting: bool,
    pub schedule: WeightSchedule,
    pub anchors: AnchorParams,
    pub outer_passes: usize,
    pub lm_iterations: usize,
    pub max_match_dist: f64,
}

impl Default for OdometryParams {
    fn default() -> Self {
        Self {
            graph: GraphParams::odometry(),
            graph_filter: true,
            weighting: true,
            schedule: WeightSchedule::default(),
            anchors: AnchorParams::default(),
            outer_passes: 2,
            lm_iterations: 4,
            max_match_dist: 5.0,
        }
    }
}

impl OdometryParams {
    /// Plain nearest-neighbor association with unit weights.
    pub fn unfiltered(mut self) -> Self {
        self.graph_filter = false;
        self.weighting = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassReport {
    pub initial_matches: usize,
    pub unmatched: usize,
    pub kept: usize,
    pub removed: usize,
    pub histogram: [usize; 10],
    pub blocks: usize,
    pub dropped_blocks: usize,
    pub solve: Option<SolveReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeEstimate {
    pub relative: PoseSE3,
    pub passes: Vec<PassReport>,
    /// Set when a pass could not be solved; `relative` then holds the last
    /// good estimate (the prediction if none).
    pub degraded: Option<String>,
}

/// Estimates the transform mapping `curr` features into the frame of the
/// reference scan, starting from `initial`.
pub fn estimate_relative(
    curr: &FeatureSet,
    reference: &FeatureIndex,
    lookup: &ChannelLookup,
    initial: PoseSE3,
    params: &OdometryParams,
) -> RelativeEstimate {
    let mut pose = initial;
    let mut passes = Vec::new();
    if curr.is_empty() || reference.features.is_empty() {
        return RelativeEstimate {
            relative: pose,
            passes,
            degraded: Some(Error::InsufficientFeatures("empty feature set".into()).to_string()),
        };
    }
    let curr = &canonical_order(curr);
    let solver = SolverOptions::default().with_max_iterations(params.lm_iterations);
    for _ in 0..params.outer_passes.max(1) {
        let initial_matches = initial_correspondences(curr, reference, &pose, params.max_match_dist);
        let n_initial = initial_matches.correspondences.len();
        let matches = if params.graph_filter {
            filter_by_subgraphs(initial_matches.correspondences, &params.graph)
        } else {
            FilteredMatches::unfiltered(initial_matches.correspondences)
        };
        let weights = if params.graph_filter && params.weighting {
            params.schedule.weights(&matches.votes)
        } else {
            vec![1.0; matches.kept.len()]
        };
        let residuals = build_residuals(&matches, &weights, reference, lookup, &pose, &params.anchors);
        let mut report = PassReport {
            initial_matches: n_initial,
            unmatched: initial_matches.dropped,
            kept: matches.kept.len(),
            removed: matches.removed,
            histogram: matches.histogram,
            blocks: residuals.blocks.len(),
            dropped_blocks: residuals.dropped,
            solve: None,
        };
        match lm_solve(&residuals.blocks, pose, &solver) {
            Ok((next, solve)) => {
                pose = next;
                report.solve = Some(solve);
                passes.push(report);
            }
            Err(e) => {
                passes.push(report);
                return RelativeEstimate {
                    relative: pose,
                    passes,
                    degraded: Some(e.to_string()),
                };
            }
        }
    }
    RelativeEstimate {
        relative: pose,
        passes,
        degraded: None,
    }
}

/// Sorts features by position so sector splits, vote tie-breaks and rank
/// weights do not depend on the order features arrived in.
fn canonical_order(fs: &FeatureSet) -> FeatureSet {
    let key = |a: &Feature, b: &Feature| {
        let (p, q) = (&a.point.position, &b.point.position);
        p.x.total_cmp(&q.x)
            .then(p.y.total_cmp(&q.y))
            .then(p.z.total_cmp(&q.z))
            .then(a.point.channel.cmp(&b.point.channel))
            .then(a.subregion.cmp(&b.subregion))
    };
    let mut out = fs.clone();
    out.edges.sort_by(key);
    out.planars.sort_by(key);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryFrame {
    pub index: usize,
    pub timestamp: f64,
    /// Transform from this scan's frame into the previous scan's frame.
    pub relative: PoseSE3,
    /// This scan's pose in the odometry world frame.
    pub global: PoseSE3,
    pub passes: Vec<PassReport>,
    pub degraded: Option<String>,
}

/// Sequential frame-in / frame-out odometry with a constant-velocity prior.
#[derive(Debug)]
pub struct Odometry {
    params: OdometryParams,
    previous: Option<(FeatureIndex, ChannelLookup)>,
    velocity: PoseSE3,
    global: PoseSE3,
    frames: usize,
}

impl Odometry {
    pub fn new(params: OdometryParams) -> Self {
        Self {
            params,
            previous: None,
            velocity: PoseSE3::identity(),
            global: PoseSE3::identity(),
            frames: 0,
        }
    }

    pub fn params(&self) -> &OdometryParams {
        &self.params
    }

    /// Motion expected over the next sweep: the last relative transform.
    pub fn predicted_motion(&self) -> PoseSE3 {
        self.velocity
    }

    pub fn process(&mut self, features: FeatureSet, timestamp: f64) -> OdometryFrame {
        let index = self.frames;
        self.frames += 1;
        let (relative, passes, degraded) = match &self.previous {
            None => (PoseSE3::identity(), Vec::new(), None),
            Some((reference, lookup)) => {
                let est = estimate_relative(&features, reference, lookup, self.velocity, &self.params);
                (est.relative, est.passes, est.degraded)
            }
        };
        self.velocity = relative;
        self.global = self.global.compose(&relative);
        let lookup = ChannelLookup::new(&features);
        self.previous = Some((FeatureIndex::build(features), lookup));
        OdometryFrame {
            index,
            timestamp,
            relative,
            global: self.global,
            passes,
            degraded,
        }
    }
}

/// Convenience for one-off registrations: builds the reference index.
pub fn register_pair(
    curr: &FeatureSet,
    prev: &FeatureSet,
    initial: PoseSE3,
    params: &OdometryParams,
) -> Result<RelativeEstimate> {
    if curr.is_empty() || prev.is_empty() {
        return Err(Error::InsufficientFeatures(format!(
            "current {} / previous {} features",
            curr.len(),
            prev.len()
        )));
    }
    let reference = FeatureIndex::build(prev.clone());
    let lookup = ChannelLookup::new(prev);
    Ok(estimate_relative(curr, &reference, &lookup, initial, params))
}
