//! Nearest-neighbor search and geometric-consistency correspondence filtering.

mod graph;
mod kdtree;

pub use graph::{
    consistency_score, distance_mismatch, filter_by_subgraphs, initial_correspondences, partition_sectors, vote,
    vote_and_filter, Correspondence, FeatureIndex, FilteredMatches, GraphParams, InitialMatches, VoteTable,
};
pub use kdtree::{KdTree, Neighbor};
