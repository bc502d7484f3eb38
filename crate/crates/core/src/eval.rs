//! Absolute trajectory error.

use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::ingest::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    /// Best-fit rotation and translation over the matched positions.
    Rigid,
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Alignment::None),
            "rigid" => Ok(Alignment::Rigid),
            other => Err(Error::Config(format!("unknown alignment `{other}` (none, rigid)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Association {
    ByIndex,
    /// Nearest ground-truth timestamp within the tolerance, seconds.
    ByTimestamp(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub errors: Vec<f64>,
    /// Transform applied to the estimate before comparison.
    pub alignment: PoseSE3,
    pub matched: usize,
}

/// Pairs of (estimate, truth) positions.
pub fn associate(estimate: &Trajectory, truth: &Trajectory, association: Association) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let est = estimate.entries();
    let gt = truth.entries();
    match association {
        Association::ByIndex => est
            .iter()
            .zip(gt)
            .map(|(e, g)| (e.pose.translation, g.pose.translation))
            .collect(),
        Association::ByTimestamp(tol) => est
            .iter()
            .filter_map(|e| {
                let i = gt.partition_point(|g| g.timestamp < e.timestamp);
                let candidates = [i.checked_sub(1), Some(i)];
                candidates
                    .into_iter()
                    .flatten()
                    .filter_map(|j| gt.get(j))
                    .map(|g| ((g.timestamp - e.timestamp).abs(), g))
                    .filter(|(d, _)| *d <= tol)
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, g)| (e.pose.translation, g.pose.translation))
            })
            .collect(),
    }
}

/// Rotation and translation minimizing `Σ ‖R·a + t − b‖²` (no scale).
pub fn fit_rigid(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> PoseSE3 {
    if pairs.is_empty() {
        return PoseSE3::identity();
    }
    let n = pairs.len() as f64;
    let ca = pairs.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
    let cb = pairs.iter().map(|p| p.1).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in pairs {
        h += (a - ca) * (b - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    PoseSE3::from_rotation_matrix(&r, cb - r * ca)
}

pub fn ate_rmse(estimate: &Trajectory, truth: &Trajectory, align: Alignment, association: Association) -> Result<AteReport> {
    let pairs = associate(estimate, truth, association);
    if pairs.is_empty() {
        return Err(Error::NoOverlap);
    }
    let alignment = match align {
        Alignment::None => PoseSE3::identity(),
        Alignment::Rigid => fit_rigid(&pairs),
    };
    let errors: Vec<f64> = pairs
        .iter()
        .map(|(e, g)| (alignment.transform_point(e) - g).norm())
        .collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(AteReport {
        rmse,
        matched: errors.len(),
        errors,
        alignment,
    })
}
