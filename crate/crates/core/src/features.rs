//! Disjoint-point removal, smoothness, and non-conspicuous feature selection.
//!
//! Within each subregion of a beam channel the eligible points are ranked by
//! descending smoothness. Edges come from just below the sharpest `k` points
//! and planars from just above the flattest `l` points, so the most extreme
//! returns (often occlusion artifacts or outliers) are never used.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LidarPoint, Scan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionParams {
    /// Edges per subregion.
    pub m: usize,
    /// Planars per subregion.
    pub n: usize,
    /// Sharpest points skipped per subregion.
    pub k: usize,
    /// Flattest points skipped per subregion.
    pub l: usize,
    pub subregions: usize,
    /// Smoothness separating edges (above) from planars (below).
    pub r_t: f64,
    /// Neighbors on each side used for smoothness.
    pub half_window: usize,
    /// Neighbor-distance asymmetry above which a point is disjoint, in meters.
    pub sigma_disjoint: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            m: 2,
            n: 4,
            k: 1,
            l: 2,
            subregions: 6,
            r_t: 0.1,
            half_window: 5,
            sigma_disjoint: 0.3,
        }
    }
}

impl SelectionParams {
    /// Classic extreme-point selection: nothing skipped at either end.
    pub fn conspicuous(mut self) -> Self {
        self.k = 0;
        self.l = 0;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    Edge,
    Planar,
}

impl FeatureKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureKind::Edge => "edge",
            FeatureKind::Planar => "planar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub point: LidarPoint,
    pub subregion: u16,
    pub smoothness: f64,
}

impl Feature {
    pub fn channel(&self) -> u16 {
        self.point.channel
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub edges: Vec<Feature>,
    pub planars: Vec<Feature>,
}

impl FeatureSet {
    pub fn of_kind(&self, kind: FeatureKind) -> &[Feature] {
        match kind {
            FeatureKind::Edge => &self.edges,
            FeatureKind::Planar => &self.planars,
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len() + self.planars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty() && self.planars.is_empty()
    }

    /// Applies `f` to every feature position.
    pub fn map_positions(&self, f: impl Fn(&nalgebra::Vector3<f64>) -> nalgebra::Vector3<f64>) -> FeatureSet {
        let map = |v: &Vec<Feature>| {
            v.iter()
                .map(|ft| {
                    let mut out = *ft;
                    out.point.position = f(&ft.point.position);
                    out
                })
                .collect()
        };
        FeatureSet {
            edges: map(&self.edges),
            planars: map(&self.planars),
        }
    }
}

/// Marks interior points whose distances to the previous and next neighbor
/// differ by more than `sigma_disjoint`. Endpoints are never marked.
pub fn mark_disjoint(points: &[LidarPoint], sigma_disjoint: f64) -> Vec<bool> {
    let mut mask = vec![false; points.len()];
    if points.len() < 3 {
        return mask;
    }
    for i in 1..points.len() - 1 {
        let p = &points[i].position;
        let next = (points[i + 1].position - p).norm();
        let prev = (points[i - 1].position - p).norm();
        mask[i] = (next - prev).abs() > sigma_disjoint;
    }
    mask
}

/// `‖Σ_{j≠i} (pᵢ − pⱼ)‖ / (|S|·‖pᵢ‖)` over `half_window` neighbors on each
/// side, with `|S| = 2·half_window + 1` counting the candidate itself.
pub fn smoothness(points: &[LidarPoint], i: usize, half_window: usize) -> Result<f64> {
    if i < half_window || i + half_window >= points.len() {
        return Err(Error::InsufficientNeighbors { index: i });
    }
    let pi = points[i].position;
    let mut sum = nalgebra::Vector3::zeros();
    for j in i - half_window..=i + half_window {
        if j != i {
            sum += pi - points[j].position;
        }
    }
    let set_size = (2 * half_window + 1) as f64;
    let norm = pi.norm();
    if norm == 0.0 {
        return Err(Error::InsufficientNeighbors { index: i });
    }
    Ok(sum.norm() / (set_size * norm))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessEntry {
    /// Index into the channel's point list.
    pub point_ref: usize,
    pub r: f64,
}

/// Sorts descending by smoothness; ties keep ascending point order.
pub fn sort_by_smoothness(entries: &mut [SmoothnessEntry]) {
    entries.sort_by(|a, b| b.r.total_cmp(&a.r).then(a.point_ref.cmp(&b.point_ref)));
}

/// Picks edge and planar entries from one subregion's sorted list.
///
/// Edges are sorted positions `k .. k+m` with `r > r_t`; planars are positions
/// `len−l−n .. len−l` with `r < r_t`. Neither range reaches into the sharpest
/// `k` or the flattest `l` positions.
pub fn select_from_sorted(
    sorted: &[SmoothnessEntry],
    params: &SelectionParams,
) -> (Vec<SmoothnessEntry>, Vec<SmoothnessEntry>) {
    let len = sorted.len();
    let flat_end = len.saturating_sub(params.l);
    let edge_range = params.k.min(flat_end)..(params.k + params.m).min(flat_end);
    let planar_range = flat_end.saturating_sub(params.n).max(params.k).min(flat_end)..flat_end;
    let edges = sorted[edge_range]
        .iter()
        .filter(|e| e.r > params.r_t)
        .copied()
        .collect();
    let planars = sorted[planar_range]
        .iter()
        .filter(|e| e.r < params.r_t)
        .copied()
        .collect();
    (edges, planars)
}

/// Eligible candidates of one channel with their smoothness: not disjoint,
/// with a full neighbor window.
pub fn channel_smoothness(points: &[LidarPoint], params: &SelectionParams) -> Vec<Option<f64>> {
    let disjoint = mark_disjoint(points, params.sigma_disjoint);
    (0..points.len())
        .map(|i| {
            if disjoint[i] {
                None
            } else {
                smoothness(points, i, params.half_window).ok()
            }
        })
        .collect()
}

/// Half-open index range of subregion `s` when `len` points are split into
/// `count` equal-size runs.
pub fn subregion_bounds(len: usize, count: usize, s: usize) -> (usize, usize) {
    (s * len / count, (s + 1) * len / count)
}

fn select_channel(points: &[LidarPoint], params: &SelectionParams) -> FeatureSet {
    let r = channel_smoothness(points, params);
    let mut out = FeatureSet::default();
    let count = params.subregions.max(1);
    for s in 0..count {
        let (lo, hi) = subregion_bounds(points.len(), count, s);
        let mut entries: Vec<SmoothnessEntry> = (lo..hi)
            .filter_map(|i| r[i].map(|r| SmoothnessEntry { point_ref: i, r }))
            .collect();
        sort_by_smoothness(&mut entries);
        let (edges, planars) = select_from_sorted(&entries, params);
        let to_feature = |e: &SmoothnessEntry| Feature {
            point: points[e.point_ref],
            subregion: s as u16,
            smoothness: e.r,
        };
        out.edges.extend(edges.iter().map(to_feature));
        out.planars.extend(planars.iter().map(to_feature));
    }
    out
}

/// Runs selection on every channel (in parallel) and concatenates the results
/// in channel order.
pub fn select_features(scan: &Scan, params: &SelectionParams) -> FeatureSet {
    let per_channel: Vec<FeatureSet> = scan
        .channels
        .par_iter()
        .map(|ch| select_channel(ch, params))
        .collect();
    let mut out = FeatureSet::default();
    for fs in per_channel {
        out.edges.extend(fs.edges);
        out.planars.extend(fs.planars);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(coords: &[[f64; 3]]) -> Vec<LidarPoint> {
        coords
            .iter()
            .map(|c| LidarPoint::new(Vector3::from(*c), 0, 0.0))
            .collect()
    }

    #[test]
    fn symmetric_spacing_is_not_disjoint() {
        let p = pts(&[[10.0, 0.0, 0.0], [10.0, 1.0, 0.0], [10.0, 2.0, 0.0]]);
        assert_eq!(mark_disjoint(&p, 0.3), vec![false, false, false]);
    }

    #[test]
    fn asymmetric_gap_is_disjoint() {
        // |0.80 - 0.05| = 0.75 > 0.3
        let p = pts(&[[10.0, -0.05, 0.0], [10.0, 0.0, 0.0], [10.0, 0.8, 0.0]]);
        assert_eq!(mark_disjoint(&p, 0.3), vec![false, true, false]);
        assert_eq!(mark_disjoint(&p, 0.8), vec![false, false, false]);
    }

    #[test]
    fn short_lists_are_never_disjoint() {
        assert!(mark_disjoint(&pts(&[[1.0, 0.0, 0.0]]), 0.1).iter().all(|m| !m));
        assert!(mark_disjoint(&[], 0.1).is_empty());
    }

    #[test]
    fn collinear_center_is_perfectly_smooth() {
        let coords: Vec<[f64; 3]> = (0..11).map(|i| [5.0, i as f64 * 0.1, 1.0]).collect();
        assert!(smoothness(&pts(&coords), 5, 5).unwrap().abs() < 1e-15);
    }

    #[test]
    fn corner_matches_hand_evaluation() {
        // Corner at (4, 3, 0): five points along -x, five along -y, spacing 0.1.
        let mut coords = Vec::new();
        for j in (1..=5).rev() {
            coords.push([4.0 - 0.1 * j as f64, 3.0, 0.0]);
        }
        coords.push([4.0, 3.0, 0.0]);
        for j in 1..=5 {
            coords.push([4.0, 3.0 - 0.1 * j as f64, 0.0]);
        }
        // Σ(pᵢ − pⱼ) = (0.1·15, 0.1·15, 0) so its norm is 1.5·√2; ‖pᵢ‖ = 5; |S| = 11.
        let expected = 1.5 * 2f64.sqrt() / (11.0 * 5.0);
        let r = smoothness(&pts(&coords), 5, 5).unwrap();
        assert!((r - expected).abs() < 1e-9, "{r} vs {expected}");
    }

    #[test]
    fn window_at_boundary_is_an_error() {
        let coords: Vec<[f64; 3]> = (0..11).map(|i| [5.0, i as f64, 0.0]).collect();
        assert!(matches!(smoothness(&pts(&coords), 4, 5), Err(Error::InsufficientNeighbors { index: 4 })));
        assert!(matches!(smoothness(&pts(&coords), 6, 5), Err(Error::InsufficientNeighbors { index: 6 })));
    }

    #[test]
    fn default_threshold() {
        assert_eq!(SelectionParams::default().r_t, 0.1);
    }

    fn entries(rs: &[f64]) -> Vec<SmoothnessEntry> {
        let mut e: Vec<_> = rs
            .iter()
            .enumerate()
            .map(|(i, &r)| SmoothnessEntry { point_ref: i, r })
            .collect();
        sort_by_smoothness(&mut e);
        e
    }

    #[test]
    fn edges_are_second_and_third_sharpest() {
        let rs = [0.5, 0.9, 0.3, 0.7, 0.2, 0.01, 0.02, 0.03, 0.04, 0.05];
        let (edges, _) = select_from_sorted(&entries(&rs), &SelectionParams::default());
        let idx: Vec<usize> = edges.iter().map(|e| e.point_ref).collect();
        assert_eq!(idx, vec![3, 0]);
    }

    #[test]
    fn planars_stop_before_flattest_l() {
        let rs = [0.5, 0.9, 0.3, 0.7, 0.2, 0.01, 0.02, 0.03, 0.04, 0.05];
        let (_, planars) = select_from_sorted(&entries(&rs), &SelectionParams::default());
        // 0.01 and 0.02 are skipped; the window above them is 0.2, 0.05, 0.04, 0.03 and 0.2 fails r < r_t
        let mut idx: Vec<usize> = planars.iter().map(|e| e.point_ref).collect();
        idx.sort();
        assert_eq!(idx, vec![7, 8, 9]);
    }

    #[test]
    fn below_threshold_gives_no_edges() {
        let rs: Vec<f64> = (0..10).map(|i| 0.001 * i as f64).collect();
        let (edges, planars) = select_from_sorted(&entries(&rs), &SelectionParams::default());
        assert!(edges.is_empty());
        assert_eq!(planars.len(), 4);
    }

    #[test]
    fn tiny_subregion_respects_skips() {
        let p = SelectionParams::default();
        for len in 0..6 {
            let rs: Vec<f64> = (0..len).map(|i| if i % 2 == 0 { 0.5 + i as f64 } else { 0.001 * i as f64 }).collect();
            let sorted = entries(&rs);
            let (edges, planars) = select_from_sorted(&sorted, &p);
            let banned: Vec<usize> = sorted
                .iter()
                .take(p.k)
                .chain(sorted.iter().rev().take(p.l))
                .map(|e| e.point_ref)
                .collect();
            for e in edges.iter().chain(&planars) {
                assert!(!banned.contains(&e.point_ref));
            }
        }
    }

    fn ring(rng: &mut impl Rng, n: usize, channel: u16) -> Vec<LidarPoint> {
        // Room-like ring: a square with some noise so smoothness varies.
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                let (c, s) = (a.cos(), a.sin());
                let r = 8.0 / c.abs().max(s.abs()) + rng.random_range(-0.02..0.02);
                LidarPoint::new(Vector3::new(r * c, r * s, -1.0), channel, i as f64 / n as f64)
            })
            .collect()
    }

    #[test]
    fn selection_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut scan = Scan::new(4, 0, 0.0);
        for c in 0..4 {
            scan.channels[c] = ring(&mut rng, 600, c as u16);
        }
        let params = SelectionParams { r_t: 0.002, ..Default::default() };
        let a = select_features(&scan, &params);
        let b = select_features(&scan, &params);
        assert_eq!(a, b);
        for s in 0..6u16 {
            for c in 0..4u16 {
                let e = a.edges.iter().filter(|f| f.subregion == s && f.channel() == c).count();
                let p = a.planars.iter().filter(|f| f.subregion == s && f.channel() == c).count();
                assert!(e <= params.m && p <= params.n);
            }
        }
        assert!(a.edges.iter().all(|f| f.smoothness > params.r_t));
        assert!(a.planars.iter().all(|f| f.smoothness < params.r_t));
    }
}
