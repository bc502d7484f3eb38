//! Two-stage correspondence selection.
//!
//! Stage one pairs every feature with its nearest target through a k-d tree.
//! Stage two treats each pair as a vertex of a compatibility graph: two pairs
//! are consistent when the distance between their sources matches the
//! distance between their targets, as any shared rigid motion requires. Each
//! pair collects one vote per consistent partner, and pairs with too few votes
//! are dropped.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use crate::features::{Feature, FeatureKind, FeatureSet};
use crate::geometry::PoseSE3;
use crate::ingest::LidarPoint;

/// A vertex of the compatibility graph: a source feature and its putative target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Feature in its own scan frame.
    pub source: LidarPoint,
    /// Target in the reference frame (previous scan or map).
    pub target: Vector3<f64>,
    pub kind: FeatureKind,
    /// Graph partition the correspondence is voted in.
    pub subregion_id: u32,
    /// Index of the source within its feature list.
    pub source_index: usize,
    /// Index of the target within the reference feature list, when it is a
    /// stored point rather than a derived one such as a centroid.
    pub target_index: Option<usize>,
}

/// `exp(−d²/σ²)` with `d = ‖t_a − t_b‖ − ‖s_a − s_b‖`.
pub fn consistency_score(a: &Correspondence, b: &Correspondence, sigma: f64) -> f64 {
    let d = distance_mismatch(a, b);
    (-(d * d) / (sigma * sigma)).exp()
}

#[inline]
pub fn distance_mismatch(a: &Correspondence, b: &Correspondence) -> f64 {
    (a.target - b.target).norm() - (a.source.position - b.source.position).norm()
}

/// Vote tallies for one list of correspondences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VoteTable {
    /// `votes[i]`: partners `j ≠ i` with score ≥ η.
    pub votes: Vec<u32>,
    /// Sum of scores with every partner, kept for diagnostics.
    pub score_sums: Vec<f64>,
    /// Input indices by descending votes (ties by index).
    pub order: Vec<usize>,
    /// Input indices that passed the filter, in `order` order.
    pub kept: Vec<usize>,
}

/// Counts consistent partners for every correspondence.
pub fn vote(corrs: &[Correspondence], sigma: f64, eta: f64) -> (Vec<u32>, Vec<f64>) {
    let n = corrs.len();
    let mut votes = vec![0u32; n];
    let mut sums = vec![0f64; n];
    let inv_sigma_sq = 1.0 / (sigma * sigma);
    for i in 0..n {
        let (si, ti) = (corrs[i].source.position, corrs[i].target);
        for j in i + 1..n {
            let d = (ti - corrs[j].target).norm() - (si - corrs[j].source.position).norm();
            let s = (-(d * d) * inv_sigma_sq).exp();
            sums[i] += s;
            sums[j] += s;
            if s >= eta {
                votes[i] += 1;
                votes[j] += 1;
            }
        }
    }
    (votes, sums)
}

/// Votes within `corrs` and keeps those with more than `x·|corrs|` votes,
/// returned in descending vote order. Fewer than two correspondences pass
/// through with zero votes.
pub fn vote_and_filter(
    corrs: &[Correspondence],
    sigma: f64,
    eta: f64,
    x: f64,
) -> (Vec<Correspondence>, VoteTable) {
    let n = corrs.len();
    if n < 2 {
        let table = VoteTable {
            votes: vec![0; n],
            score_sums: vec![0.0; n],
            order: (0..n).collect(),
            kept: (0..n).collect(),
        };
        return (corrs.to_vec(), table);
    }
    let (votes, score_sums) = vote(corrs, sigma, eta);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| votes[b].cmp(&votes[a]).then(a.cmp(&b)));
    let floor = x * n as f64;
    let kept: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| votes[i] as f64 > floor)
        .collect();
    let out = kept.iter().map(|&i| corrs[i]).collect();
    (
        out,
        VoteTable {
            votes,
            score_sums,
            order,
            kept,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    pub sigma: f64,
    pub eta: f64,
    pub x: f64,
    /// Target correspondences per subgraph.
    pub sector_size: usize,
    pub min_sectors: usize,
}

impl GraphParams {
    pub fn odometry() -> Self {
        Self {
            sigma: 0.2,
            eta: 0.9,
            x: 0.10,
            sector_size: 200,
            min_sectors: 6,
        }
    }

    pub fn mapping() -> Self {
        Self {
            sigma: 0.5,
            sector_size: 350,
            ..Self::odometry()
        }
    }
}

/// Splits correspondences into azimuthal sectors of roughly equal count.
///
/// The sector count is `max(min_sectors, ⌈N / sector_size⌉)`, capped at `N`.
/// Returned index lists preserve input order.
pub fn partition_sectors(corrs: &[Correspondence], sector_size: usize, min_sectors: usize) -> Vec<Vec<usize>> {
    let n = corrs.len();
    if n == 0 {
        return Vec::new();
    }
    let count = min_sectors
        .max(n.div_ceil(sector_size.max(1)))
        .clamp(1, n);
    let mut by_azimuth: Vec<(f64, usize)> = corrs
        .iter()
        .enumerate()
        .map(|(i, c)| (c.source.position.y.atan2(c.source.position.x), i))
        .collect();
    by_azimuth.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut sectors: Vec<Vec<usize>> = (0..count)
        .map(|s| {
            let (lo, hi) = (s * n / count, (s + 1) * n / count);
            by_azimuth[lo..hi].iter().map(|&(_, i)| i).collect()
        })
        .collect();
    for s in &mut sectors {
        s.sort_unstable();
    }
    sectors
}

/// Result of running the graph filter over all subgraphs of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilteredMatches {
    /// Kept correspondences by descending vote (ties by input order).
    pub kept: Vec<Correspondence>,
    /// Votes of `kept`, aligned.
    pub votes: Vec<u32>,
    pub initial: usize,
    pub removed: usize,
    /// Histogram of `o_i / (|subgraph| − 1)` over all correspondences, in ten bins.
    pub histogram: [usize; 10],
}

impl FilteredMatches {
    /// All correspondences kept with zero votes, in input order.
    pub fn unfiltered(corrs: Vec<Correspondence>) -> Self {
        let n = corrs.len();
        let mut histogram = [0; 10];
        histogram[0] = n;
        Self {
            votes: vec![0; n],
            kept: corrs,
            initial: n,
            removed: 0,
            histogram,
        }
    }

    pub fn diagnostics_line(&self) -> String {
        let mut s = format!(
            "initial {} kept {} removed {} hist",
            self.initial,
            self.kept.len(),
            self.removed
        );
        for h in &self.histogram {
            write!(s, " {h}").unwrap();
        }
        s
    }
}

/// Partitions, votes each subgraph independently (in parallel), and merges
/// the survivors into one global descending-vote ordering.
pub fn filter_by_subgraphs(corrs: Vec<Correspondence>, params: &GraphParams) -> FilteredMatches {
    let initial = corrs.len();
    let sectors = partition_sectors(&corrs, params.sector_size, params.min_sectors);
    let results: Vec<(Vec<(usize, u32)>, [usize; 10])> = sectors
        .par_iter()
        .enumerate()
        .map(|(sid, idx)| {
            let sub: Vec<Correspondence> = idx
                .iter()
                .map(|&i| {
                    let mut c = corrs[i];
                    c.subregion_id = sid as u32;
                    c
                })
                .collect();
            let (_, table) = vote_and_filter(&sub, params.sigma, params.eta, params.x);
            let mut hist = [0usize; 10];
            let denom = (sub.len().max(2) - 1) as f64;
            for &v in &table.votes {
                let bin = ((v as f64 / denom) * 10.0).floor() as usize;
                hist[bin.min(9)] += 1;
            }
            let kept = table.kept.iter().map(|&k| (idx[k], table.votes[k])).collect();
            (kept, hist)
        })
        .collect();

    let mut merged: Vec<(usize, u32, u32)> = Vec::new();
    let mut histogram = [0usize; 10];
    for (sid, (kept, hist)) in results.into_iter().enumerate() {
        merged.extend(kept.into_iter().map(|(i, v)| (i, v, sid as u32)));
        for (h, x) in histogram.iter_mut().zip(hist) {
            *h += x;
        }
    }
    merged.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let kept: Vec<Correspondence> = merged
        .iter()
        .map(|&(i, _, sid)| {
            let mut c = corrs[i];
            c.subregion_id = sid;
            c
        })
        .collect();
    FilteredMatches {
        votes: merged.iter().map(|m| m.1).collect(),
        removed: initial - kept.len(),
        kept,
        initial,
        histogram,
    }
}

/// k-d trees over the edge and planar features of a reference scan.
#[derive(Debug, Clone)]
pub struct FeatureIndex {
    pub features: FeatureSet,
    edges: Option<KdTree>,
    planars: Option<KdTree>,
}

impl FeatureIndex {
    pub fn build(features: FeatureSet) -> Self {
        let tree = |v: &[Feature]| KdTree::build(v.iter().map(|f| f.point.position).collect()).ok();
        Self {
            edges: tree(&features.edges),
            planars: tree(&features.planars),
            features,
        }
    }

    pub fn tree(&self, kind: FeatureKind) -> Option<&KdTree> {
        match kind {
            FeatureKind::Edge => self.edges.as_ref(),
            FeatureKind::Planar => self.planars.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InitialMatches {
    pub correspondences: Vec<Correspondence>,
    /// Features with no same-kind target within the distance cap.
    pub dropped: usize,
}

/// Pairs every feature, projected by `guess`, with its nearest same-kind
/// reference feature. Several sources may share one target.
pub fn initial_correspondences(
    features: &FeatureSet,
    reference: &FeatureIndex,
    guess: &PoseSE3,
    max_match_dist: f64,
) -> InitialMatches {
    let mut out = InitialMatches::default();
    for kind in [FeatureKind::Edge, FeatureKind::Planar] {
        let src = features.of_kind(kind);
        let Some(tree) = reference.tree(kind) else {
            out.dropped += src.len();
            continue;
        };
        for (i, f) in src.iter().enumerate() {
            let q = guess.transform_point(&f.point.position);
            match tree.knn_within(&q, 1, max_match_dist).first() {
                Some(nb) => out.correspondences.push(Correspondence {
                    source: f.point,
                    target: nb.point,
                    kind,
                    subregion_id: f.subregion as u32,
                    source_index: i,
                    target_index: Some(nb.index),
                }),
                None => out.dropped += 1,
            }
        }
    }
    out
}
