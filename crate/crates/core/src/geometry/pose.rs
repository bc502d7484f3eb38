//! Rigid transforms in 3D.

use nalgebra::{Isometry3, Matrix3, Matrix4, Rotation3, Translation3, UnitQuaternion, Vector3, Vector6};

/// A rigid transform `x -> R x + t` with the rotation kept as a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Builds a pose from an axis-angle rotation vector and a translation.
    pub fn from_axis_angle(rotation_vector: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(rotation_vector), translation)
    }

    /// Builds a pose from a rotation matrix, re-orthonormalizing it first.
    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix(rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
        .renormalized()
    }

    pub fn inverse(&self) -> PoseSE3 {
        let inv_rot = self.rotation.inverse();
        PoseSE3 {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    /// Relative transform taking `self`'s frame to `other`'s frame: `self⁻¹ ∘ other`.
    pub fn between(&self, other: &PoseSE3) -> PoseSE3 {
        self.inverse().compose(other)
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// 4×4 homogeneous matrix.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> PoseSE3 {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::from_rotation_matrix(&r, t)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> PoseSE3 {
        PoseSE3::new(iso.rotation, iso.translation.vector)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn translation_norm(&self) -> f64 {
        self.translation.norm()
    }

    /// Applies a left-multiplied increment `δ = (ω, v)`:
    /// `R ← Exp(ω) R`, `t ← Exp(ω) t + v`.
    pub fn retract_left(&self, delta: &Vector6<f64>) -> PoseSE3 {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        let inc = UnitQuaternion::from_scaled_axis(omega);
        PoseSE3 {
            rotation: inc * self.rotation,
            translation: inc * self.translation + v,
        }
        .renormalized()
    }

    /// Interpolates between identity (`s = 0`) and `self` (`s = 1`):
    /// rotation by slerp, translation linearly.
    pub fn interpolate_from_identity(&self, s: f64) -> PoseSE3 {
        let rotation = UnitQuaternion::identity()
            .try_slerp(&self.rotation, s, 1e-12)
            .unwrap_or_else(|| UnitQuaternion::from_scaled_axis(self.rotation.scaled_axis() * s));
        PoseSE3 {
            rotation,
            translation: self.translation * s,
        }
    }

    /// Rotation angle and translation norm of `self⁻¹ ∘ other`.
    pub fn error_to(&self, other: &PoseSE3) -> (f64, f64) {
        let d = self.between(other);
        (d.rotation_angle(), d.translation_norm())
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }

    fn renormalized(mut self) -> PoseSE3 {
        self.rotation.renormalize();
        self
    }
}

impl std::ops::Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

/// Skew-symmetric matrix `[v]×` with `[v]× w = v × w`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn arb_pose() -> impl Strategy<Value = PoseSE3> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-20.0f64..20.0),
        )
            .prop_map(|(w, t)| PoseSE3::from_axis_angle(Vector3::from(w), Vector3::from(t)))
    }

    #[test]
    fn identity_composes_to_identity() {
        let p = PoseSE3::identity().compose(&PoseSE3::identity());
        assert_eq!(p.rotation_angle(), 0.0);
        assert_eq!(p.translation_norm(), 0.0);
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let a = PoseSE3::from_axis_angle(Vector3::new(0.3, -0.2, 1.1), Vector3::new(1.0, 2.0, -3.0));
        let b = PoseSE3::from_axis_angle(Vector3::new(-0.7, 0.4, 0.05), Vector3::new(-4.0, 0.5, 2.5));
        let expected = a.to_matrix() * b.to_matrix();
        let got = a.compose(&b).to_matrix();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn matrix_round_trip() {
        let a = PoseSE3::from_axis_angle(Vector3::new(0.3, -0.2, 1.1), Vector3::new(1.0, 2.0, -3.0));
        let b = PoseSE3::from_matrix(&a.to_matrix());
        let (rot, trans) = a.error_to(&b);
        assert!(rot < 1e-12 && trans < 1e-12);
    }

    #[test]
    fn interpolation_endpoints() {
        let m = PoseSE3::from_axis_angle(Vector3::new(0.0, 0.0, 0.4), Vector3::new(1.0, 0.0, 0.0));
        let half = m.interpolate_from_identity(0.5);
        assert_relative_eq!(half.translation, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(half.rotation_angle(), 0.2, epsilon = 1e-12);
        let end = m.interpolate_from_identity(1.0);
        assert!(end.error_to(&m).0 < 1e-12);
    }

    proptest! {
        #[test]
        fn group_inverse(p in arb_pose()) {
            let e = p.compose(&p.inverse());
            prop_assert!(e.rotation_angle() < 1e-9);
            prop_assert!(e.translation_norm() < 1e-9);
            let e = p.inverse().compose(&p);
            prop_assert!(e.rotation_angle() < 1e-9);
            prop_assert!(e.translation_norm() < 1e-9);
        }

        #[test]
        fn associativity(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            let (rot, trans) = l.error_to(&r);
            prop_assert!(rot < 1e-9 && trans < 1e-9);
        }

        #[test]
        fn quaternion_stays_normalized(p in arb_pose(), d in prop::array::uniform6(-1.0f64..1.0)) {
            let q = p.retract_left(&Vector6::from(d)).compose(&p);
            prop_assert!((q.rotation.coords.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn retract_is_left_multiplication(p in arb_pose(), d in prop::array::uniform6(-1.0f64..1.0)) {
            let delta = Vector6::from(d);
            let inc = PoseSE3::from_axis_angle(
                Vector3::new(d[0], d[1], d[2]),
                Vector3::new(d[3], d[4], d[5]),
            );
            let (rot, trans) = p.retract_left(&delta).error_to(&inc.compose(&p));
            prop_assert!(rot < 1e-9 && trans < 1e-9);
        }
    }
}
