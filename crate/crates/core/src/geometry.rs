//! Minimal rigid-body geometry shared by all modules: 3-vectors, unit
//! quaternions and SE(3) poses, plus the handful of SO(3) tangent-space
//! helpers the estimators need.
//!
//! Conventions: Hamilton quaternions, scalar-first on the wire, passive
//! rotations. A `Pose` maps body-frame points into the world frame
//! (`x_w = R x_b + t`), i.e. it is the world-from-body transform.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Rotation = UnitQuaternion<f64>;

/// Rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_parts(qw: f64, qx: f64, qy: f64, qz: f64, t: Vec3) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        Pose::new(q, t)
    }

    /// Apply the transform to a point.
    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotate a direction without translating it.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Composition: `(a ∘ b)(x) = a(b(x))`. The result's quaternion is
    /// renormalized so long chains do not drift.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut q = self.rotation * other.rotation;
        q.renormalize();
        Pose {
            rotation: q,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Relative transform taking this frame into `other`: `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Rotation about a unit axis by `angle` radians.
///
/// Rejects axes with zero (or non-finite) norm; the axis is normalized so a
/// slightly off-unit input still yields an exact unit quaternion.
pub fn rotate_axis_angle(axis: Vec3, angle: f64) -> Result<Rotation, Error> {
    let n = axis.norm();
    if !n.is_finite() || n < 1e-12 {
        return Err(Error::ZeroAxis);
    }
    Ok(UnitQuaternion::from_scaled_axis(axis * (angle / n)))
}

/// Skew-symmetric matrix such that `skew(a) * b == a × b`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential map: rotation vector to quaternion.
pub fn so3_exp(phi: &Vec3) -> Rotation {
    UnitQuaternion::from_scaled_axis(*phi)
}

/// SO(3) logarithm map: quaternion to rotation vector.
pub fn so3_log(q: &Rotation) -> Vec3 {
    q.scaled_axis()
}

/// Right Jacobian of SO(3): `Exp(phi + d) ≈ Exp(phi) Exp(Jr(phi) d)`.
pub fn so3_right_jacobian(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-8 {
        return Mat3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Mat3::identity() - k * ((1.0 - theta.cos()) / t2)
        + (k * k) * ((theta - theta.sin()) / (t2 * theta))
}

/// Inverse of the right Jacobian: `Log(Exp(phi) Exp(d)) ≈ phi + Jr⁻¹(phi) d`.
pub fn so3_right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-8 {
        return Mat3::identity() + 0.5 * k + k * k / 12.0;
    }
    let coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + 0.5 * k + (k * k) * coeff
}

/// Inverse of the left Jacobian: `Log(Exp(d) Exp(phi)) ≈ phi + Jl⁻¹(phi) d`.
pub fn so3_left_jacobian_inv(phi: &Vec3) -> Mat3 {
    so3_right_jacobian_inv(&(-phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        let angle = rng.gen::<f64>() * std::f64::consts::PI;
        let q = rotate_axis_angle(axis.normalize(), angle).unwrap();
        let t = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * 4.0;
        Pose::new(q, t)
    }

    #[test]
    fn identity_composes_to_identity() {
        let id = Pose::identity();
        let c = id.compose(&id);
        assert_eq!(c.translation, Vec3::zeros());
        assert_relative_eq!(c.rotation.angle(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn pose_times_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let i = p.compose(&p.inverse());
            assert!(i.translation.norm() < 1e-12);
            assert!(i.rotation.angle() < 1e-12);
        }
    }

    #[test]
    fn composition_matches_double_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let x = Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 10.0;
            let composed = a.compose(&b).transform(&x);
            let sequential = a.transform(&b.transform(&x));
            worst = worst.max((composed - sequential).norm());
        }
        assert!(worst < 1e-12, "worst deviation {worst}");
    }

    #[test]
    fn inverse_transform_recovers_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let x = Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 10.0;
            let back = p.inverse().transform(&p.transform(&x));
            assert!((back - x).norm() < 1e-12);
        }
    }

    #[test]
    fn quaternion_norm_preserved_under_long_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut acc = Pose::identity();
        for _ in 0..2000 {
            acc = acc.compose(&random_pose(&mut rng));
            let n = acc.rotation.as_ref().norm();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_angle_zero_angle_is_identity() {
        let q = rotate_axis_angle(Vec3::z(), 0.0).unwrap();
        assert_eq!(q, Rotation::identity());
    }

    #[test]
    fn axis_angle_quarter_turn_about_z() {
        let q = rotate_axis_angle(Vec3::z(), std::f64::consts::FRAC_PI_2).unwrap();
        let v = q * Vec3::x();
        assert_relative_eq!(v.x, 0.0, epsilon = 1e-15);
        assert_relative_eq!(v.y, 1.0, epsilon = 1e-15);
        assert_relative_eq!(v.z, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn axis_angle_rejects_zero_axis() {
        assert!(matches!(
            rotate_axis_angle(Vec3::zeros(), 1.0),
            Err(Error::ZeroAxis)
        ));
    }

    // Independent quaternion log for the round-trip oracle: extract axis and
    // angle straight from the quaternion components via atan2.
    fn log_oracle(q: &Rotation) -> Vec3 {
        let w = q.w;
        let v = Vec3::new(q.i, q.j, q.k);
        let n = v.norm();
        if n < 1e-300 {
            return Vec3::zeros();
        }
        let angle = 2.0 * n.atan2(w);
        v / n * angle
    }

    #[test]
    fn axis_angle_round_trips_through_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let axis = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let angle = rng.gen::<f64>() * 3.0;
            let q = rotate_axis_angle(axis, angle).unwrap();
            let phi = log_oracle(&q);
            assert!((phi - axis * angle).norm() < 1e-12);
        }
    }

    #[test]
    fn right_jacobian_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let phi = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ) * 2.0;
            let jr = so3_right_jacobian(&phi);
            let h = 1e-7;
            for col in 0..3 {
                let mut d = Vec3::zeros();
                d[col] = h;
                // Exp(phi + d) vs Exp(phi) Exp(Jr d)
                let lhs = so3_exp(&(phi + d));
                let rhs = so3_exp(&phi) * so3_exp(&(jr * d));
                let diff = so3_log(&(lhs.inverse() * rhs)).norm();
                assert!(diff < 1e-9, "col {col}: {diff}");
            }
        }
    }

    #[test]
    fn right_jacobian_inverse_is_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let phi = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ) * 2.0;
            let prod = so3_right_jacobian(&phi) * so3_right_jacobian_inv(&phi);
            assert!((prod - Mat3::identity()).norm() < 1e-9);
        }
    }
}
