//! Rigid-body math, residual terms, and the pose solver shared by odometry
//! and mapping.

mod pose;
mod residual;
mod solver;

pub use pose::{skew, PoseSE3};
pub use residual::{
    point_jacobian, point_to_line_residual, point_to_plane_residual, ResidualBlock, ResidualKind,
    MIN_ANCHOR_SEPARATION, MIN_PLANE_CROSS,
};
pub use solver::{effective_residual_count, lm_solve, total_cost, SolveReport, SolverOptions, Termination};
