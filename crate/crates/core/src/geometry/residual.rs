//! Point-to-line and point-to-plane residuals.

use nalgebra::{Matrix3, RowVector3, SMatrix, Vector3};

use super::pose::{skew, PoseSE3};
use crate::error::{Error, Result};

/// Minimum anchor separation for a line, in meters.
pub const MIN_ANCHOR_SEPARATION: f64 = 1e-6;
/// Minimum cross-product norm for three plane anchors.
pub const MIN_PLANE_CROSS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResidualKind {
    PointToLine,
    PointToPlane,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Anchors {
    Line([Vector3<f64>; 2]),
    Plane([Vector3<f64>; 3]),
}

/// Geometry of one residual term plus its weight.
///
/// Anchors are validated on construction, so a block that exists always has a
/// well-defined line direction or plane normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlock {
    source: Vector3<f64>,
    anchors: Anchors,
    weight: f64,
}

/// Jacobian of `T·p` with respect to the left increment `(ω, v)`.
#[inline]
pub fn point_jacobian(transformed: &Vector3<f64>) -> SMatrix<f64, 3, 6> {
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(transformed)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

impl ResidualBlock {
    pub fn point_to_line(
        source: Vector3<f64>,
        a: Vector3<f64>,
        b: Vector3<f64>,
        weight: f64,
    ) -> Result<Self> {
        if (a - b).norm() <= MIN_ANCHOR_SEPARATION {
            return Err(Error::DegenerateAnchors("line anchors coincide"));
        }
        Ok(Self {
            source,
            anchors: Anchors::Line([a, b]),
            weight: weight.max(0.0),
        })
    }

    pub fn point_to_plane(
        source: Vector3<f64>,
        a: Vector3<f64>,
        b: Vector3<f64>,
        c: Vector3<f64>,
        weight: f64,
    ) -> Result<Self> {
        if (a - b).cross(&(a - c)).norm() <= MIN_PLANE_CROSS {
            return Err(Error::DegenerateAnchors("plane anchors are collinear"));
        }
        Ok(Self {
            source,
            anchors: Anchors::Plane([a, b, c]),
            weight: weight.max(0.0),
        })
    }

    pub fn kind(&self) -> ResidualKind {
        match self.anchors {
            Anchors::Line(_) => ResidualKind::PointToLine,
            Anchors::Plane(_) => ResidualKind::PointToPlane,
        }
    }

    pub fn source(&self) -> &Vector3<f64> {
        &self.source
    }

    pub fn anchors(&self) -> &[Vector3<f64>] {
        match &self.anchors {
            Anchors::Line(a) => a,
            Anchors::Plane(a) => a,
        }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight.max(0.0);
        self
    }

    /// Same anchors and weight, different source point.
    pub fn with_source(mut self, source: Vector3<f64>) -> Self {
        self.source = source;
        self
    }

    /// Unit normal `(a−b)×(a−c) / |(a−b)×(a−c)|` of a plane block.
    pub fn plane_normal(&self) -> Option<Vector3<f64>> {
        match &self.anchors {
            Anchors::Plane([a, b, c]) => Some((a - b).cross(&(a - c)).normalize()),
            Anchors::Line(_) => None,
        }
    }

    /// Unweighted scalar residual at `pose`: perpendicular distance for a
    /// line (≥ 0), signed distance along the normal for a plane.
    pub fn evaluate(&self, pose: &PoseSE3) -> f64 {
        let q = pose.transform_point(&self.source);
        match &self.anchors {
            Anchors::Line([a, b]) => (q - a).cross(&(q - b)).norm() / (a - b).norm(),
            Anchors::Plane([a, _, _]) => self.plane_normal().unwrap().dot(&(q - a)),
        }
    }

    /// Gradient of [`evaluate`](Self::evaluate) with respect to the left
    /// increment. Zero for a line residual exactly on its line.
    pub fn scalar_jacobian(&self, pose: &PoseSE3) -> SMatrix<f64, 1, 6> {
        let q = pose.transform_point(&self.source);
        let dq = point_jacobian(&q);
        match &self.anchors {
            Anchors::Line([a, b]) => {
                let c = (q - a).cross(&(q - b));
                let cn = c.norm();
                if cn < 1e-15 {
                    return SMatrix::zeros();
                }
                let ab = a - b;
                let df_dq: RowVector3<f64> = (c / cn).transpose() * (-skew(&ab)) / ab.norm();
                df_dq * dq
            }
            Anchors::Plane(_) => self.plane_normal().unwrap().transpose() * dq,
        }
    }

    /// Number of independent directions the block constrains.
    pub fn rank(&self) -> usize {
        match self.anchors {
            Anchors::Line(_) => 2,
            Anchors::Plane(_) => 1,
        }
    }

    /// Weighted residual rows and their Jacobian for the solver.
    ///
    /// A line block is linearized through its cross-product vector
    /// `(q−a)×(q−b)/|a−b|`, whose norm is the scalar distance; it stays
    /// differentiable on the line. Rows are scaled by `√w` so the solver cost
    /// is `Σ w·f²`.
    pub fn linearize(&self, pose: &PoseSE3, out: &mut Vec<(f64, SMatrix<f64, 1, 6>)>) {
        let q = pose.transform_point(&self.source);
        let dq = point_jacobian(&q);
        let sw = self.weight.sqrt();
        match &self.anchors {
            Anchors::Line([a, b]) => {
                let ab = a - b;
                let inv = 1.0 / ab.norm();
                let r = (q - a).cross(&(q - b)) * inv;
                let j = -skew(&ab) * inv * dq;
                for row in 0..3 {
                    out.push((sw * r[row], j.fixed_view::<1, 6>(row, 0) * sw));
                }
            }
            Anchors::Plane([a, _, _]) => {
                let n = self.plane_normal().unwrap();
                out.push((sw * n.dot(&(q - a)), n.transpose() * dq * sw));
            }
        }
    }

    /// Weighted squared residual `w·f²`.
    pub fn cost(&self, pose: &PoseSE3) -> f64 {
        let f = self.evaluate(pose);
        self.weight * f * f
    }

    /// Applies a rigid motion to source and anchors alike.
    pub fn transformed(&self, motion: &PoseSE3) -> Self {
        let mut out = *self;
        out.source = motion.transform_point(&self.source);
        match &mut out.anchors {
            Anchors::Line(a) => a.iter_mut().for_each(|p| *p = motion.transform_point(p)),
            Anchors::Plane(a) => a.iter_mut().for_each(|p| *p = motion.transform_point(p)),
        }
        out
    }
}

/// Distance from `q` to the line through `a` and `b`.
pub fn point_to_line_residual(block: &ResidualBlock, pose: &PoseSE3) -> Result<f64> {
    match block.kind() {
        ResidualKind::PointToLine => Ok(block.evaluate(pose)),
        ResidualKind::PointToPlane => Err(Error::DegenerateAnchors("expected a line block")),
    }
}

/// Signed distance from `q` to the anchor plane.
pub fn point_to_plane_residual(block: &ResidualBlock, pose: &PoseSE3) -> Result<f64> {
    match block.kind() {
        ResidualKind::PointToPlane => Ok(block.evaluate(pose)),
        ResidualKind::PointToLine => Err(Error::DegenerateAnchors("expected a plane block")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector6;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn rand_vec(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
        v(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn rand_pose(rng: &mut impl Rng) -> PoseSE3 {
        PoseSE3::from_axis_angle(rand_vec(rng, 1.5), rand_vec(rng, 5.0))
    }

    // Independent evaluation straight from the formulas.
    fn line_oracle(q: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>) -> f64 {
        let u = q - a;
        let w = q - b;
        let cx = u.y * w.z - u.z * w.y;
        let cy = u.z * w.x - u.x * w.z;
        let cz = u.x * w.y - u.y * w.x;
        let d = a - b;
        (cx * cx + cy * cy + cz * cz).sqrt() / (d.x * d.x + d.y * d.y + d.z * d.z).sqrt()
    }

    fn plane_oracle(q: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>) -> f64 {
        let u = a - b;
        let w = a - c;
        let n = [u.y * w.z - u.z * w.y, u.z * w.x - u.x * w.z, u.x * w.y - u.y * w.x];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        ((q.x - a.x) * n[0] + (q.y - a.y) * n[1] + (q.z - a.z) * n[2]) / len
    }

    #[test]
    fn line_point_on_line_is_zero() {
        let b = ResidualBlock::point_to_line(v(0.5, 0.0, 0.0), v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), 1.0)
            .unwrap();
        assert_eq!(point_to_line_residual(&b, &PoseSE3::identity()).unwrap(), 0.0);
    }

    #[test]
    fn line_unit_offset() {
        let b = ResidualBlock::point_to_line(v(0.0, 0.0, 1.0), v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), 1.0)
            .unwrap();
        assert_eq!(point_to_line_residual(&b, &PoseSE3::identity()).unwrap(), 1.0);
    }

    #[test]
    fn coincident_line_anchors_rejected() {
        let r = ResidualBlock::point_to_line(v(0.0, 0.0, 1.0), v(1.0, 1.0, 1.0), v(1.0, 1.0, 1.0 + 1e-7), 1.0);
        assert!(matches!(r, Err(Error::DegenerateAnchors(_))));
    }

    #[test]
    fn plane_in_plane_is_zero_and_unit_height() {
        let (a, b, c) = (v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0));
        let on = ResidualBlock::point_to_plane(v(0.3, 0.7, 0.0), a, b, c, 1.0).unwrap();
        assert_eq!(point_to_plane_residual(&on, &PoseSE3::identity()).unwrap(), 0.0);
        let up = ResidualBlock::point_to_plane(v(0.0, 0.0, 1.0), a, b, c, 1.0).unwrap();
        assert_eq!(point_to_plane_residual(&up, &PoseSE3::identity()).unwrap().abs(), 1.0);
    }

    #[test]
    fn collinear_plane_anchors_rejected() {
        let r = ResidualBlock::point_to_plane(v(0.0, 0.0, 1.0), v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(2.0, 0.0, 0.0), 1.0);
        assert!(matches!(r, Err(Error::DegenerateAnchors(_))));
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let b = ResidualBlock::point_to_line(v(0.0, 0.0, 1.0), v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), 1.0)
            .unwrap();
        assert!(point_to_plane_residual(&b, &PoseSE3::identity()).is_err());
    }

    #[test]
    fn random_blocks_match_direct_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let pose = rand_pose(&mut rng);
            let (p, a, b, c) = (rand_vec(&mut rng, 10.0), rand_vec(&mut rng, 10.0), rand_vec(&mut rng, 10.0), rand_vec(&mut rng, 10.0));
            let q = pose.transform_point(&p);
            let line = ResidualBlock::point_to_line(p, a, b, 1.0).unwrap();
            assert!((line.evaluate(&pose) - line_oracle(q, a, b)).abs() < 1e-9);
            let plane = ResidualBlock::point_to_plane(p, a, b, c, 1.0).unwrap();
            assert!((plane.evaluate(&pose) - plane_oracle(q, a, b, c)).abs() < 1e-9);
        }
    }

    #[test]
    fn line_vector_form_norm_is_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let pose = rand_pose(&mut rng);
            let w = rng.random_range(0.0..3.0);
            let b = ResidualBlock::point_to_line(rand_vec(&mut rng, 5.0), rand_vec(&mut rng, 5.0), rand_vec(&mut rng, 5.0), w).unwrap();
            let mut rows = Vec::new();
            b.linearize(&pose, &mut rows);
            let sq: f64 = rows.iter().map(|(r, _)| r * r).sum();
            assert!((sq - b.cost(&pose)).abs() < 1e-9 * (1.0 + sq));
        }
    }

    fn central_difference(f: impl Fn(&PoseSE3) -> f64, pose: &PoseSE3, h: f64) -> SMatrix<f64, 1, 6> {
        let mut g = SMatrix::<f64, 1, 6>::zeros();
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = f(&pose.retract_left(&d));
            d[k] = -h;
            let minus = f(&pose.retract_left(&d));
            g[k] = (plus - minus) / (2.0 * h);
        }
        g
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let pose = rand_pose(&mut rng);
            let (p, a, b, c) = (rand_vec(&mut rng, 5.0), rand_vec(&mut rng, 5.0), rand_vec(&mut rng, 5.0), rand_vec(&mut rng, 5.0));
            for block in [
                ResidualBlock::point_to_line(p, a, b, 1.0).unwrap(),
                ResidualBlock::point_to_plane(p, a, b, c, 1.0).unwrap(),
            ] {
                let fd = central_difference(|t| block.evaluate(t), &pose, 1e-6);
                let an = block.scalar_jacobian(&pose);
                assert!((fd - an).abs().max() < 1e-5, "{fd} vs {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn residuals_invariant_under_shared_rigid_motion(
            w in prop::array::uniform3(-2.0f64..2.0),
            t in prop::array::uniform3(-10.0f64..10.0),
            pts in prop::array::uniform4(prop::array::uniform3(-5.0f64..5.0)),
        ) {
            let m = PoseSE3::from_axis_angle(Vector3::from(w), Vector3::from(t));
            let [p, a, b, c] = pts.map(Vector3::from);
            if let Ok(line) = ResidualBlock::point_to_line(p, a, b, 1.0) {
                let d = line.evaluate(&PoseSE3::identity()) - line.transformed(&m).evaluate(&PoseSE3::identity());
                prop_assert!(d.abs() < 1e-9);
            }
            if (a - b).cross(&(a - c)).norm() > 1e-3 {
                let plane = ResidualBlock::point_to_plane(p, a, b, c, 1.0).unwrap();
                let d = plane.evaluate(&PoseSE3::identity()) - plane.transformed(&m).evaluate(&PoseSE3::identity());
                prop_assert!(d.abs() < 1e-9);
            }
        }
    }
}
