//! Static 3D k-d tree with exact k-nearest-neighbor queries.
//!
//! Results are ordered by distance, with equal distances ordered by insertion
//! index, so a query always returns the same set a brute-force sort would.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Insertion index of the point.
    pub index: usize,
    pub distance: f64,
    pub point: Vector3<f64>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist_sq: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn build(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyTree);
        }
        let mut tree = KdTree {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        let n = tree.points.len();
        tree.build_node(0, n);
        Ok(tree)
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

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in slice {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// The `k` nearest points to `query`, closest first.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        self.knn_within(query, k, f64::INFINITY)
    }

    /// Like [`knn`](Self::knn) but ignores points farther than `max_distance`.
    pub fn knn_within(&self, query: &Vector3<f64>, k: usize, max_distance: f64) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let bound = max_distance * max_distance;
        self.search(0, query, k, bound, &mut heap);
        let mut found = heap.into_vec();
        found.sort();
        found
            .into_iter()
            .map(|c| Neighbor {
                index: c.index,
                distance: c.dist_sq.sqrt(),
                point: self.points[c.index],
            })
            .collect()
    }

    pub fn nearest(&self, query: &Vector3<f64>) -> Neighbor {
        self.knn(query, 1)[0]
    }

    fn worst(heap: &BinaryHeap<Candidate>, k: usize, bound: f64) -> f64 {
        if heap.len() < k {
            bound
        } else {
            heap.peek().map_or(bound, |c| c.dist_sq)
        }
    }

    fn search(
        &self,
        node: usize,
        query: &Vector3<f64>,
        k: usize,
        bound: f64,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let dist_sq = (self.points[i] - query).norm_squared();
                    if dist_sq > bound {
                        continue;
                    }
                    let cand = Candidate { dist_sq, index: i };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, bound, heap);
                // `<=` keeps equal-distance points on the far side reachable for index tie-breaks.
                if diff * diff <= Self::worst(heap, k, bound) {
                    self.search(far, query, k, bound, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(points: &[Vector3<f64>], q: &Vector3<f64>, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - q).norm_squared(), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn empty_build_fails() {
        assert!(matches!(KdTree::build(Vec::new()), Err(Error::EmptyTree)));
    }

    #[test]
    fn stored_point_is_its_own_nearest() {
        let pts = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.0, 4.0), Vector3::new(5.0, 5.0, 5.0)];
        let tree = KdTree::build(pts.clone()).unwrap();
        let n = tree.nearest(&pts[1]);
        assert_eq!(n.index, 1);
        assert_eq!(n.distance, 0.0);
    }

    #[test]
    fn random_queries_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<Vector3<f64>> = (0..100)
            .map(|_| Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)))
            .collect();
        let tree = KdTree::build(pts.clone()).unwrap();
        for _ in 0..200 {
            let q = Vector3::new(rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0));
            let got: Vec<usize> = tree.knn(&q, 5).iter().map(|n| n.index).collect();
            assert_eq!(got, brute_force(&pts, &q, 5));
        }
    }

    #[test]
    fn saturated_k_returns_everything_sorted() {
        let pts: Vec<Vector3<f64>> = (0..7).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let tree = KdTree::build(pts.clone()).unwrap();
        let q = Vector3::new(2.2, 0.0, 0.0);
        let got: Vec<usize> = tree.knn(&q, 50).iter().map(|n| n.index).collect();
        assert_eq!(got, brute_force(&pts, &q, 50));
        assert_eq!(got.len(), 7);
    }

    #[test]
    fn ties_break_by_insertion_index() {
        // Many duplicates force equal distances across leaves.
        let mut pts = Vec::new();
        for i in 0..40 {
            pts.push(Vector3::new((i % 4) as f64, 0.0, 0.0));
        }
        let tree = KdTree::build(pts.clone()).unwrap();
        let q = Vector3::new(1.5, 0.0, 0.0);
        let got: Vec<usize> = tree.knn(&q, 13).iter().map(|n| n.index).collect();
        assert_eq!(got, brute_force(&pts, &q, 13));
    }

    #[test]
    fn radius_limit() {
        let pts: Vec<Vector3<f64>> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let tree = KdTree::build(pts).unwrap();
        let got = tree.knn_within(&Vector3::zeros(), 10, 2.5);
        assert_eq!(got.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn grid_points_match_brute_force(
            raw in prop::collection::vec(prop::array::uniform3(-5i32..5), 1..120),
            q in prop::array::uniform3(-6.0f64..6.0),
            k in 1usize..12,
        ) {
            let pts: Vec<Vector3<f64>> = raw.iter().map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect();
            let tree = KdTree::build(pts.clone()).unwrap();
            let q = Vector3::from(q);
            let got: Vec<usize> = tree.knn(&q, k).iter().map(|n| n.index).collect();
            prop_assert_eq!(got, brute_force(&pts, &q, k));
        }
    }
}
