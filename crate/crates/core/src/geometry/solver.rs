//! Damped Gauss-Newton (Levenberg–Marquardt) over a rigid pose.

use nalgebra::{Matrix6, SMatrix, Vector6};

use super::pose::PoseSE3;
use super::residual::ResidualBlock;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Damping above this value ends the solve.
    pub max_damping: f64,
    pub min_step_norm: f64,
    pub min_relative_decrease: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 4,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            max_damping: 1e10,
            min_step_norm: 1e-10,
            min_relative_decrease: 1e-8,
        }
    }
}

impl SolverOptions {
    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The starting cost was already zero.
    ZeroCost,
    StepTooSmall,
    CostDecreaseTooSmall,
    MaxIterations,
    /// Every trial step increased the cost until damping hit its ceiling.
    NoImprovement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Accepted steps.
    pub iterations: usize,
    /// Accepted plus rejected trial steps.
    pub trials: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Independent directions constrained by the blocks (2 per line, 1 per plane),
/// counting only blocks with positive weight.
pub fn effective_residual_count(blocks: &[ResidualBlock]) -> usize {
    blocks
        .iter()
        .filter(|b| b.weight() > 0.0)
        .map(|b| b.rank())
        .sum()
}

pub fn total_cost(blocks: &[ResidualBlock], pose: &PoseSE3) -> f64 {
    blocks.iter().map(|b| b.cost(pose)).sum()
}

fn normal_equations(blocks: &[ResidualBlock], pose: &PoseSE3) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let mut rows: Vec<(f64, SMatrix<f64, 1, 6>)> = Vec::with_capacity(blocks.len() * 3);
    for b in blocks {
        b.linearize(pose, &mut rows);
    }
    let mut jtj = Matrix6::zeros();
    let mut jtf = Vector6::zeros();
    let mut cost = 0.0;
    for (r, j) in &rows {
        jtj += j.transpose() * j;
        jtf += j.transpose() * *r;
        cost += r * r;
    }
    (jtj, jtf, cost)
}

/// Minimizes `Σ wᵢ fᵢ²` over the pose starting from `initial`.
///
/// Each step solves `(JᵀJ + λ·diag(JᵀJ)) δ = −Jᵀf` and applies `δ` as a left
/// increment. A step is accepted only if it lowers the cost, so the returned
/// cost never exceeds the initial one.
pub fn lm_solve(
    blocks: &[ResidualBlock],
    initial: PoseSE3,
    opts: &SolverOptions,
) -> Result<(PoseSE3, SolveReport)> {
    let effective = effective_residual_count(blocks);
    if effective < 6 {
        return Err(Error::UnderConstrained { effective });
    }

    let mut pose = initial;
    let (mut jtj, mut jtf, mut cost) = normal_equations(blocks, &pose);
    let initial_cost = cost;
    let mut report = SolveReport {
        iterations: 0,
        trials: 0,
        initial_cost,
        final_cost: cost,
        termination: Termination::MaxIterations,
        cost_history: vec![cost],
    };
    if cost <= f64::MIN_POSITIVE {
        report.termination = Termination::ZeroCost;
        return Ok((pose, report));
    }

    let mut lambda = opts.initial_damping;
    let mut singular_retries = 0usize;
    'outer: while report.iterations < opts.max_iterations {
        loop {
            if lambda > opts.max_damping {
                if singular_retries > 0 && report.iterations == 0 && singular_retries == report.trials {
                    return Err(Error::SingularNormalEquations {
                        retries: singular_retries,
                    });
                }
                report.termination = Termination::NoImprovement;
                break 'outer;
            }
            report.trials += 1;
            let mut damped = jtj;
            for k in 0..6 {
                damped[(k, k)] += lambda * jtj[(k, k)];
            }
            let Some(chol) = damped.cholesky() else {
                singular_retries += 1;
                lambda *= opts.damping_increase;
                continue;
            };
            let delta = -chol.solve(&jtf);
            if !delta.iter().all(|v| v.is_finite()) {
                singular_retries += 1;
                lambda *= opts.damping_increase;
                continue;
            }
            let candidate = pose.retract_left(&delta);
            let candidate_cost = total_cost(blocks, &candidate);
            if candidate_cost < cost {
                let decrease = (cost - candidate_cost) / cost;
                pose = candidate;
                report.iterations += 1;
                report.cost_history.push(candidate_cost);
                lambda /= opts.damping_decrease;
                (jtj, jtf, cost) = normal_equations(blocks, &pose);
                if cost <= f64::MIN_POSITIVE {
                    report.termination = Termination::ZeroCost;
                    break 'outer;
                }
                if delta.norm() < opts.min_step_norm {
                    report.termination = Termination::StepTooSmall;
                    break 'outer;
                }
                if decrease < opts.min_relative_decrease {
                    report.termination = Termination::CostDecreaseTooSmall;
                    break 'outer;
                }
                break;
            }
            if delta.norm() < opts.min_step_norm {
                report.termination = Termination::StepTooSmall;
                break 'outer;
            }
            lambda *= opts.damping_increase;
        }
    }
    report.final_cost = cost;
    Ok((pose, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    /// Blocks whose residuals vanish at `truth`: anchors are built in the
    /// target frame around `truth·p`.
    fn blocks_from_truth(rng: &mut impl Rng, truth: &PoseSE3, n: usize) -> Vec<ResidualBlock> {
        let mut out = Vec::new();
        for i in 0..n {
            let p = rand_vec(rng, 10.0);
            let q = truth.transform_point(&p);
            let d1 = rand_vec(rng, 1.0).normalize();
            if i % 2 == 0 {
                out.push(ResidualBlock::point_to_line(p, q + d1 * 0.7, q - d1 * 1.3, 1.0).unwrap());
            } else {
                let d2 = d1.cross(&rand_vec(rng, 1.0)).normalize();
                out.push(ResidualBlock::point_to_plane(p, q + d1 * 0.5, q - d2 * 0.8, q + d1 * 0.3 + d2 * 0.9, 1.0).unwrap());
            }
        }
        out
    }

    #[test]
    fn converged_start_returns_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = PoseSE3::from_axis_angle(Vector3::new(0.1, 0.0, -0.2), Vector3::new(1.0, 0.0, 0.5));
        let blocks = blocks_from_truth(&mut rng, &truth, 40);
        let (pose, rep) = lm_solve(&blocks, truth, &SolverOptions::default()).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(pose, truth);
        assert!(rep.final_cost < 1e-20);
    }

    #[test]
    fn recovers_known_pose_from_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let truth = PoseSE3::from_axis_angle(rand_vec(&mut rng, 0.3), rand_vec(&mut rng, 2.0));
            let blocks = blocks_from_truth(&mut rng, &truth, 60);
            let opts = SolverOptions::default().with_max_iterations(50);
            let (pose, rep) = lm_solve(&blocks, PoseSE3::identity(), &opts).unwrap();
            let (rot, trans) = pose.error_to(&truth);
            assert!(rot < 1e-6 && trans < 1e-6, "rot {rot} trans {trans} {rep:?}");
        }
    }

    #[test]
    fn cost_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let truth = PoseSE3::from_axis_angle(rand_vec(&mut rng, 0.5), rand_vec(&mut rng, 3.0));
            let mut blocks = blocks_from_truth(&mut rng, &truth, 30);
            // corrupt a few so the optimum is not exact
            for b in blocks.iter_mut().take(5) {
                *b = b.transformed(&PoseSE3::from_translation(rand_vec(&mut rng, 0.5)));
            }
            let (_, rep) = lm_solve(&blocks, PoseSE3::identity(), &SolverOptions::default().with_max_iterations(30)).unwrap();
            assert!(rep.cost_history.windows(2).all(|w| w[1] <= w[0]));
            assert!(rep.final_cost <= rep.initial_cost);
        }
    }

    #[test]
    fn under_constrained_is_rejected() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let blocks = vec![
            ResidualBlock::point_to_line(p, Vector3::zeros(), Vector3::x(), 1.0).unwrap(),
            ResidualBlock::point_to_line(p, Vector3::zeros(), Vector3::y(), 1.0).unwrap(),
            ResidualBlock::point_to_plane(p, Vector3::zeros(), Vector3::x(), Vector3::y(), 0.0).unwrap(),
        ];
        assert!(matches!(
            lm_solve(&blocks, PoseSE3::identity(), &SolverOptions::default()),
            Err(Error::UnderConstrained { effective: 4 })
        ));
    }

    #[test]
    fn parallel_planes_leave_singular_directions() {
        // Six copies of one plane: rotation about its normal and in-plane
        // translation never appear in JᵀJ.
        let blocks: Vec<_> = (0..6)
            .map(|i| {
                let p = Vector3::new(i as f64, 0.0, 1.0);
                ResidualBlock::point_to_plane(p, Vector3::zeros(), Vector3::x(), Vector3::y(), 1.0).unwrap()
            })
            .collect();
        let r = lm_solve(&blocks, PoseSE3::identity(), &SolverOptions::default());
        assert!(matches!(r, Err(Error::SingularNormalEquations { .. })), "{r:?}");
    }
}
