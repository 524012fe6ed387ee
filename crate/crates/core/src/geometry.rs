//! Rigid-body transforms and the pinhole camera.
//!
//! Poses are camera-to-world: `x_world = R * x_cam + t`, and the inverse
//! mapping used everywhere for projection is `x_cam = Rᵀ (x_world - t)`.

use nalgebra::{Matrix2x3, Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// Below this rotation angle the exponential and logarithm switch to their
/// Taylor series.
const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric cross-product matrix, `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula for the rotation `exp([ω]×)`.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`so3_exp`] for rotations with angle below π.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < SMALL_ANGLE {
        w * 0.5
    } else {
        w * (theta / (2.0 * theta.sin()))
    }
}

/// A rigid transform. Camera-to-world when used as a camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Pose of a camera at `eye` looking at `target`, with image y pointing
    /// roughly along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        Self::new(Matrix3::from_columns(&[x, y, z]), eye)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// `R x + t`.
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `Rᵀ (x - t)`: world point into the camera frame of this pose.
    pub fn world_to_cam(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(x - self.translation))
    }

    /// Right-multiplied rotation update `R ← R exp(-ω)` and `t ← t - Δt`,
    /// the parameterization shared by tracking and pose refinement.
    pub fn retract(&self, omega: &Vector3<f64>, delta_t: &Vector3<f64>) -> Pose {
        Pose::new(
            self.rotation * so3_exp(&(-omega)),
            self.translation - delta_t,
        )
    }

    /// Project the rotation back onto SO(3) to remove accumulated rounding.
    pub fn orthonormalized(&self) -> Pose {
        let rot = Rotation3::from_matrix_eps(&self.rotation, 1e-12, 20, Rotation3::identity());
        Pose::new(*rot.matrix(), self.translation)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, t: Vector3<f64>) -> Pose {
        Pose::new(*q.to_rotation_matrix().matrix(), t)
    }

    /// Rotation angle between two poses in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        so3_log(&(self.rotation.transpose() * other.rotation)).norm()
    }
}

/// Element of se(3): rotation part `omega` (radians) and translation part `v` (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(xi: &Vector6<f64>) -> Self {
        Self::new(xi.fixed_rows::<3>(0).into(), xi.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn neg(&self) -> Twist {
        Twist::new(-self.omega, -self.v)
    }

    /// Left Jacobian of SO(3), which maps `v` to the translation of `exp(ξ)`.
    fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let k = skew(omega);
        let (b, c) = if theta < SMALL_ANGLE {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            (
                (1.0 - theta.cos()) / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        Matrix3::identity() + k * b + k * k * c
    }

    /// Exponential map onto a rigid transform.
    pub fn exp(&self) -> Pose {
        let r = so3_exp(&self.omega);
        let t = Self::left_jacobian(&self.omega) * self.v;
        Pose::new(r, t)
    }

    /// Logarithm of a pose whose rotation angle is below π.
    pub fn log(pose: &Pose) -> Twist {
        let omega = so3_log(&pose.rotation);
        let j = Self::left_jacobian(&omega);
        let v = j
            .try_inverse()
            .expect("left Jacobian is invertible below π")
            * pose.translation;
        Twist::new(omega, v)
    }
}

/// Pinhole intrinsics plus the depth-image scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Raw depth units per meter (5000 for TUM).
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale: 5000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && self.depth_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn backproject(&self, px: &Vector2<f64>, z: f64) -> Result<Vector3<f64>> {
        if !(z > 0.0) {
            return Err(Error::InvalidDepth(z));
        }
        Ok(Vector3::new(
            (px.x - self.cx) * z / self.fx,
            (px.y - self.cy) * z / self.fy,
            z,
        ))
    }

    /// Same camera at `factor` times the resolution. Pixel centers are kept
    /// aligned, so `cx' = (cx + 0.5) s - 0.5`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: (self.cx + 0.5) * factor - 0.5,
            cy: (self.cy + 0.5) * factor - 0.5,
            width: (self.width as f64 * factor).round() as usize,
            height: (self.height as f64 * factor).round() as usize,
            depth_scale: self.depth_scale,
        }
    }

    /// `dπ/dq` at a camera-frame point.
    pub fn project_jacobian(&self, q: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / q.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * q.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * q.y * iz2,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100)
    }

    #[test]
    fn scaled_intrinsics_keep_pixel_footprints() {
        let k = Intrinsics::new(140.0, 140.0, 79.5, 59.5, 160, 120);
        let k2 = k.scaled(2.0);
        assert_eq!((k2.width, k2.height), (320, 240));
        let p = Vector3::new(0.1, -0.2, 1.5);
        // pixel x in the coarse image covers [2x - 0.5, 2x + 1.5] in the fine one
        let a = k.project(&p).unwrap();
        let b = k2.project(&p).unwrap();
        assert!(((b - Vector2::repeat(0.5)) - (a * 2.0)).norm() < 1e-12);
    }

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    fn twist(max_angle: f64) -> impl Strategy<Value = Twist> {
        (vec3(), vec3()).prop_map(move |(w, v)| {
            let w = if w.norm() > max_angle {
                w.normalize() * max_angle * 0.999
            } else {
                w
            };
            Twist::new(w, v)
        })
    }

    #[test]
    fn project_examples() {
        let k = k100();
        let p = k.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(50.0, 50.0));
        let p = k.project(&Vector3::new(0.5, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(100.0, 50.0));
        assert!(matches!(
            k.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn backproject_examples() {
        let k = k100();
        let p = k.backproject(&Vector2::new(50.0, 50.0), 2.0).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
        let p = k.backproject(&Vector2::new(150.0, 50.0), 1.0).unwrap();
        assert_eq!(p, Vector3::new(1.0, 0.0, 1.0));
        assert!(matches!(
            k.backproject(&Vector2::new(0.0, 0.0), 0.0),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn exp_examples() {
        let id = Twist::zero().exp();
        assert_eq!(id.rotation, Matrix3::identity());
        assert_eq!(id.translation, Vector3::zeros());

        let quarter = Twist::new(
            Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            Vector3::zeros(),
        )
        .exp();
        let y = quarter.apply(&Vector3::x());
        assert!((y - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn small_angle_series_is_continuous() {
        let w = Vector3::new(3e-9, -2e-9, 1e-9);
        let a = so3_exp(&w);
        let b = so3_exp(&(w * 1.0001e1));
        assert!((a - Matrix3::identity()).norm() < 1e-8);
        assert!((b - Matrix3::identity()).norm() < 1e-7);
    }

    #[test]
    fn translation_pose_example() {
        let p = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(p.world_to_cam(&Vector3::new(1.0, 0.0, 0.0)), Vector3::zeros());
        let x = Vector3::new(0.3, -0.2, 4.0);
        assert_eq!(Pose::identity().world_to_cam(&x), x);
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let k = Intrinsics::new(525.0, 520.0, 319.5, 239.5, 640, 480);
        let mut rng_state = 7u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let q = Vector3::new(next() * 2.0 - 1.0, next() * 2.0 - 1.0, 0.3 + 4.7 * next());
            let j = k.project_jacobian(&q);
            for c in 0..3 {
                let h = 1e-6 * q.norm();
                let mut qp = q;
                let mut qm = q;
                qp[c] += h;
                qm[c] -= h;
                let fd = (k.project(&qp).unwrap() - k.project(&qm).unwrap()) / (2.0 * h);
                let an = j.column(c);
                let scale = an.norm().max(1e-12);
                assert!((fd - an).norm() / scale < 1e-5, "column {c}: {fd} vs {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(x in -3.0..3.0f64, y in -3.0..3.0f64, z in 0.05..8.0f64) {
            let k = k100();
            let p = Vector3::new(x, y, z);
            let back = k.backproject(&k.project(&p).unwrap(), z).unwrap();
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn exp_of_negated_twist_is_inverse(xi in twist(3.0)) {
            let p = xi.exp().compose(&xi.neg().exp());
            prop_assert!((p.rotation - Matrix3::identity()).norm() < 1e-9);
            prop_assert!(p.translation.norm() < 1e-9);
        }

        #[test]
        fn log_inverts_exp(xi in twist(3.0)) {
            let back = Twist::log(&xi.exp());
            prop_assert!((back.to_vector() - xi.to_vector()).norm() < 1e-7);
        }

        #[test]
        fn exp_is_a_rotation(xi in twist(3.1)) {
            let r = xi.exp().rotation;
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn world_to_cam_inverts_apply(xi in twist(3.0), y in vec3()) {
            let p = xi.exp();
            prop_assert!((p.world_to_cam(&p.apply(&y)) - y).norm() < 1e-9);
            let id = p.compose(&p.inverse());
            prop_assert!((id.rotation - Matrix3::identity()).norm() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-9);
        }

        #[test]
        fn quaternion_round_trip(xi in twist(3.0)) {
            let p = xi.exp();
            let back = Pose::from_quaternion(p.quaternion(), p.translation);
            prop_assert!((back.rotation - p.rotation).norm() < 1e-9);
        }
    }
}
