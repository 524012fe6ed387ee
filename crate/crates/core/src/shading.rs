//! Image-formation models: first-order spherical harmonics for distant
//! natural light, and an isotropic point light collocated with the camera.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Which image-formation model a refinement run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShadingModel {
    Sh,
    Pls,
}

impl ShadingModel {
    pub fn name(self) -> &'static str {
        match self {
            ShadingModel::Sh => "sh",
            ShadingModel::Pls => "pls",
        }
    }
}

impl std::str::FromStr for ShadingModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sh" => Ok(ShadingModel::Sh),
            "pls" => Ok(ShadingModel::Pls),
            other => Err(Error::InvalidArgument(format!("unknown shading model '{other}'"))),
        }
    }
}

/// Per-frame lighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LightState {
    /// SH coefficients in the camera frame, one 4-vector per color channel.
    /// All three are equal when lighting is shared across channels.
    Sh([Vector4<f64>; 3]),
    /// Point-light intensity Ψ ≥ 0.
    Pls(f64),
}

impl LightState {
    pub fn sh(l: Vector4<f64>) -> Self {
        LightState::Sh([l; 3])
    }

    pub fn model(&self) -> ShadingModel {
        match self {
            LightState::Sh(_) => ShadingModel::Sh,
            LightState::Pls(_) => ShadingModel::Pls,
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            LightState::Sh(c) => c.iter().all(|l| l.iter().all(|v| v.is_finite())),
            LightState::Pls(psi) => psi.is_finite() && *psi >= 0.0,
        }
    }

    /// Coefficients as written to reports: 4 (shared SH), 12 (per-channel SH) or 1 (PLS).
    pub fn coefficients(&self) -> Vec<f64> {
        match self {
            LightState::Sh(c) if c[0] == c[1] && c[1] == c[2] => c[0].iter().copied().collect(),
            LightState::Sh(c) => c.iter().flat_map(|l| l.iter().copied()).collect(),
            LightState::Pls(psi) => vec![*psi],
        }
    }
}

/// First-order SH basis `(1, n.x, n.y, n.z)`; constants are folded into the lighting vector.
pub fn sh_basis(n: &Vector3<f64>) -> Vector4<f64> {
    Vector4::new(1.0, n.x, n.y, n.z)
}

/// Rotate camera-frame SH coefficients into the world frame: `l̂ = (l₀, R l₁..₃)`.
pub fn sh_to_world(l: &Vector4<f64>, rotation: &Matrix3<f64>) -> Vector4<f64> {
    let v = rotation * Vector3::new(l[1], l[2], l[3]);
    Vector4::new(l[0], v.x, v.y, v.z)
}

pub fn sh_to_camera(l_world: &Vector4<f64>, rotation: &Matrix3<f64>) -> Vector4<f64> {
    let v = rotation.tr_mul(&Vector3::new(l_world[1], l_world[2], l_world[3]));
    Vector4::new(l_world[0], v.x, v.y, v.z)
}

/// `ρ ⟨l, SH(Rᵀ n)⟩` with one lighting vector shared by all channels.
pub fn render_sh(albedo: &Vector3<f64>, n_world: &Vector3<f64>, pose: &Pose, l: &Vector4<f64>) -> Vector3<f64> {
    let n_cam = pose.rotation.tr_mul(n_world);
    albedo * l.dot(&sh_basis(&n_cam))
}

/// Per-channel variant of [`render_sh`].
pub fn render_sh_rgb(
    albedo: &Vector3<f64>,
    n_world: &Vector3<f64>,
    pose: &Pose,
    l: &[Vector4<f64>; 3],
) -> Vector3<f64> {
    let basis = sh_basis(&pose.rotation.tr_mul(n_world));
    Vector3::new(
        albedo.x * l[0].dot(&basis),
        albedo.y * l[1].dot(&basis),
        albedo.z * l[2].dot(&basis),
    )
}

/// `Ψ ρ max(⟨n_cam, -x_cam⟩, 0) / ‖x_cam‖³` for a light at the camera center.
pub fn render_pls(albedo: &Vector3<f64>, n_cam: &Vector3<f64>, x_cam: &Vector3<f64>, psi: f64) -> Result<Vector3<f64>> {
    let dist = x_cam.norm();
    if dist < 1e-6 {
        return Err(Error::SingularGeometry);
    }
    let cos = n_cam.dot(&(-x_cam)).max(0.0);
    Ok(albedo * (psi * cos / (dist * dist * dist)))
}

/// Render the intensity of world point `x` with world normal `n` seen from `pose`.
pub fn render(
    albedo: &Vector3<f64>,
    n_world: &Vector3<f64>,
    x_world: &Vector3<f64>,
    pose: &Pose,
    light: &LightState,
) -> Result<Vector3<f64>> {
    match light {
        LightState::Sh(l) => Ok(render_sh_rgb(albedo, n_world, pose, l)),
        LightState::Pls(psi) => {
            let x_cam = pose.world_to_cam(x_world);
            let n_cam = pose.rotation.tr_mul(n_world);
            render_pls(albedo, &n_cam, &x_cam, *psi)
        }
    }
}

/// Multi-view residual `I - ρ M(x)`.
pub fn residual(
    intensity: &Vector3<f64>,
    albedo: &Vector3<f64>,
    n_world: &Vector3<f64>,
    x_world: &Vector3<f64>,
    pose: &Pose,
    light: &LightState,
) -> Result<Vector3<f64>> {
    Ok(intensity - render(albedo, n_world, x_world, pose, light)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;
    use proptest::prelude::*;

    fn unit(v: (f64, f64, f64)) -> Vector3<f64> {
        let n = Vector3::new(v.0, v.1, v.2);
        if n.norm() < 1e-3 {
            Vector3::z()
        } else {
            n.normalize()
        }
    }

    #[test]
    fn sh_basis_examples() {
        assert_eq!(sh_basis(&Vector3::z()), Vector4::new(1.0, 0.0, 0.0, 1.0));
        assert_eq!(sh_basis(&Vector3::x()), Vector4::new(1.0, 1.0, 0.0, 0.0));
        let n = Vector3::new(0.6, 0.0, 0.8);
        let l = Vector4::new(0.0, 0.3, -0.2, 0.5);
        assert!((l.dot(&sh_basis(&n)) - Vector3::new(0.3, -0.2, 0.5).dot(&n)).abs() < 1e-15);
    }

    #[test]
    fn render_sh_examples() {
        let rho = Vector3::repeat(0.5);
        let pose = Twist::new(Vector3::new(0.3, -1.0, 0.2), Vector3::new(1.0, 2.0, 3.0)).exp();
        let n = Vector3::new(0.0, 0.6, -0.8);
        let out = render_sh(&rho, &n, &pose, &Vector4::new(1.0, 0.0, 0.0, 0.0));
        assert!((out - rho).norm() < 1e-15);
        let out = render_sh(
            &Vector3::repeat(1.0),
            &Vector3::z(),
            &Pose::identity(),
            &Vector4::new(0.0, 0.0, 0.0, 1.0),
        );
        assert_eq!(out, Vector3::repeat(1.0));
    }

    #[test]
    fn render_pls_examples() {
        let one = Vector3::repeat(1.0);
        let n = Vector3::new(0.0, 0.0, -1.0);
        let out = render_pls(&one, &n, &Vector3::new(0.0, 0.0, 1.0), 1.0).unwrap();
        assert_eq!(out, one);
        let out = render_pls(&one, &n, &Vector3::new(0.0, 0.0, 2.0), 1.0).unwrap();
        assert!((out - one * 0.25).norm() < 1e-15);
        let out = render_pls(&one, &Vector3::z(), &Vector3::new(0.0, 0.0, 1.0), 1.0).unwrap();
        assert_eq!(out, Vector3::zeros());
        assert!(matches!(
            render_pls(&one, &n, &Vector3::zeros(), 1.0),
            Err(Error::SingularGeometry)
        ));
    }

    #[test]
    fn residual_examples() {
        let rho = Vector3::new(0.2, 0.4, 0.8);
        let n = Vector3::new(0.0, 0.0, -1.0);
        let x = Vector3::new(0.1, 0.0, 1.5);
        let pose = Pose::identity();
        for light in [LightState::sh(Vector4::new(0.5, 0.1, 0.2, -0.4)), LightState::Pls(1.3)] {
            let i = render(&rho, &n, &x, &pose, &light).unwrap();
            assert!(residual(&i, &rho, &n, &x, &pose, &light).unwrap().norm() < 1e-15);
            let half = residual(&i, &(rho * 0.5), &n, &x, &pose, &light).unwrap();
            assert!((half - i * 0.5).norm() < 1e-15);
        }
    }

    #[test]
    fn world_sh_parameterization_matches_camera_frame() {
        let pose = Twist::new(Vector3::new(0.4, 0.1, -0.7), Vector3::zeros()).exp();
        let l = Vector4::new(0.3, 0.2, -0.5, 0.7);
        let lw = sh_to_world(&l, &pose.rotation);
        let n = Vector3::new(0.1, -0.3, 0.9).normalize();
        let cam = render_sh(&Vector3::repeat(1.0), &n, &pose, &l).x;
        assert!((cam - lw.dot(&sh_basis(&n))).abs() < 1e-14);
        assert!((sh_to_camera(&lw, &pose.rotation) - l).norm() < 1e-14);
    }

    #[test]
    fn pls_falls_off_with_inverse_square_at_normal_incidence() {
        let one = Vector3::repeat(1.0);
        let n = Vector3::new(0.0, 0.0, -1.0);
        for d in [0.5, 1.0, 1.7, 3.0] {
            let a = render_pls(&one, &n, &Vector3::new(0.0, 0.0, d), 2.0).unwrap();
            let b = render_pls(&one, &n, &Vector3::new(0.0, 0.0, 2.0 * d), 2.0).unwrap();
            assert!((b.x * 4.0 - a.x).abs() < 1e-12 * a.x);
        }
    }

    proptest! {
        #[test]
        fn sh_is_linear_in_light_and_albedo(
            l in proptest::array::uniform4(-1.0..1.0f64),
            n in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
            s in 0.1..5.0f64,
        ) {
            let l = Vector4::from(l);
            let n = unit(n);
            let rho = Vector3::new(0.3, 0.5, 0.9);
            let pose = Twist::new(Vector3::new(0.2, 0.5, 0.1), Vector3::zeros()).exp();
            let base = render_sh(&rho, &n, &pose, &l);
            prop_assert!((render_sh(&rho, &n, &pose, &(l * s)) - base * s).norm() < 1e-12);
            prop_assert!((render_sh(&(rho * s), &n, &pose, &l) - base * s).norm() < 1e-12);
        }

        #[test]
        fn pls_is_linear_in_intensity_and_albedo(
            n in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
            x in (-0.5..0.5f64, -0.5..0.5f64, 0.5..3.0f64),
            s in 0.1..5.0f64,
        ) {
            let n = unit(n);
            let x = Vector3::new(x.0, x.1, x.2);
            let rho = Vector3::new(0.3, 0.5, 0.9);
            let base = render_pls(&rho, &n, &x, 1.2).unwrap();
            prop_assert!((render_pls(&rho, &n, &x, 1.2 * s).unwrap() - base * s).norm() < 1e-12);
            prop_assert!((render_pls(&(rho * s), &n, &x, 1.2).unwrap() - base * s).norm() < 1e-12);
        }

        #[test]
        fn pls_invariant_to_rotation_about_the_viewing_ray(
            n in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
            x in (-0.5..0.5f64, -0.5..0.5f64, 0.5..3.0f64),
            angle in -3.0..3.0f64,
        ) {
            let n = unit(n);
            let x = Vector3::new(x.0, x.1, x.2);
            let r = crate::geometry::so3_exp(&(x.normalize() * angle));
            let rho = Vector3::repeat(0.7);
            let a = render_pls(&rho, &n, &x, 1.0).unwrap();
            let b = render_pls(&rho, &(r * n), &x, 1.0).unwrap();
            prop_assert!((a - b).norm() < 1e-12);
        }
    }
}
