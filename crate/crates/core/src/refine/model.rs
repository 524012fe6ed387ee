//! Per voxel-frame photometric residual and its analytic derivatives.

use nalgebra::{Matrix3, Matrix3x4, Matrix3x6, Vector2, Vector3, Vector4};

use crate::geometry::{skew, Intrinsics, Pose};
use crate::image::IntensitySampler;
use crate::shading::{sh_basis, LightState};

/// Where the photometric residual of a voxel is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalAt {
    /// The projected surface point `v - ψ g`.
    #[default]
    SurfacePoint,
    /// The voxel center itself.
    VoxelCenter,
}

impl std::str::FromStr for EvalAt {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "surface_point" => Ok(EvalAt::SurfacePoint),
            "voxel_center" => Ok(EvalAt::VoxelCenter),
            other => Err(crate::Error::InvalidArgument(format!("unknown evaluation point '{other}'"))),
        }
    }
}

/// Geometry of a voxel as the residual sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGeometry {
    pub center: Vector3<f64>,
    pub psi: f64,
    /// Unit normal (normalized distance gradient).
    pub normal: Vector3<f64>,
    /// `dn/dψ` with the neighbours held fixed; zero when not needed.
    pub dnormal: Vector3<f64>,
}

impl VoxelGeometry {
    pub fn point(&self, at: EvalAt) -> Vector3<f64> {
        match at {
            EvalAt::SurfacePoint => self.center - self.normal * self.psi,
            EvalAt::VoxelCenter => self.center,
        }
    }

    /// `dx/dψ` of the sample point.
    pub fn dpoint(&self, at: EvalAt) -> Vector3<f64> {
        match at {
            EvalAt::SurfacePoint => -self.normal - self.dnormal * self.psi,
            EvalAt::VoxelCenter => Vector3::zeros(),
        }
    }
}

/// Everything needed to form residual rows for one voxel in one frame.
///
/// SH lighting is expected in world frame (`l̂ = (l₀, R l₁..₃)`), so the
/// shading does not depend on the camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEval {
    /// Sampled intensity.
    pub intensity: Vector3<f64>,
    /// Per-channel shading for unit albedo; the prediction is `ρ ⊙ shading`.
    pub shading: Vector3<f64>,
    pub residual: Vector3<f64>,
    /// Camera-frame sample point.
    pub q: Vector3<f64>,
    /// `dI/dq`: image gradient chained through the projection.
    pub di_dq: Matrix3<f64>,
    /// `⟨n, -(x - t)⟩`; only meaningful for the point light.
    pub cos: f64,
    /// `‖q‖³`, frozen when differentiating the point-light model.
    pub attenuation: f64,
}

/// Residual `I(π(q)) - ρ ⊙ M` for one voxel and frame.
///
/// `None` when the point is behind the camera, samples outside the image
/// interior, or (point light) faces away from the light.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pair<V: IntensitySampler + ?Sized>(
    geo: &VoxelGeometry,
    albedo: &Vector3<f64>,
    pose: &Pose,
    light: &LightState,
    view: &V,
    k: &Intrinsics,
    at: EvalAt,
    attenuation: Option<f64>,
) -> Option<PairEval> {
    let x = geo.point(at);
    let q = pose.world_to_cam(&x);
    let px: Vector2<f64> = k.project(&q).ok()?;
    let sample = view.sample(&px).ok()?;
    let di_dq = sample.grad * k.project_jacobian(&q);
    let (shading, cos, atten) = match light {
        LightState::Sh(l) => {
            let b = sh_basis(&geo.normal);
            (Vector3::new(l[0].dot(&b), l[1].dot(&b), l[2].dot(&b)), 0.0, 0.0)
        }
        LightState::Pls(psi) => {
            let cos = -geo.normal.dot(&(x - pose.translation));
            let dist = q.norm();
            if cos <= 0.0 || dist < 1e-6 {
                return None;
            }
            let atten = attenuation.unwrap_or(dist * dist * dist);
            (Vector3::repeat(psi * cos / atten), cos, atten)
        }
    };
    Some(PairEval {
        intensity: sample.value,
        shading,
        residual: sample.value - albedo.component_mul(&shading),
        q,
        di_dq,
        cos,
        attenuation: atten,
    })
}

impl PairEval {
    /// `dr/dρ` (diagonal).
    pub fn d_albedo(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&(-self.shading))
    }

    /// `dr/dl̂` for SH lighting shared across channels.
    pub fn d_sh_light(&self, albedo: &Vector3<f64>, normal: &Vector3<f64>) -> Matrix3x4<f64> {
        let b: Vector4<f64> = sh_basis(normal);
        Matrix3x4::from_rows(&[
            (b * -albedo.x).transpose(),
            (b * -albedo.y).transpose(),
            (b * -albedo.z).transpose(),
        ])
    }

    /// `dr/dΨ` for the point light.
    pub fn d_pls_intensity(&self, albedo: &Vector3<f64>) -> Vector3<f64> {
        -albedo * (self.cos / self.attenuation)
    }

    /// `dr/dψ` for the voxel's own distance, neighbours fixed and the point
    /// light attenuation lagged.
    pub fn d_psi(
        &self,
        geo: &VoxelGeometry,
        albedo: &Vector3<f64>,
        pose: &Pose,
        light: &LightState,
        at: EvalAt,
    ) -> Vector3<f64> {
        self.d_geometry(geo, albedo, pose, light, at, &geo.dnormal, &geo.dpoint(at))
    }

    /// `dr` for a change `dn` of the normal and `dx` of the sample point,
    /// attenuation lagged.
    #[allow(clippy::too_many_arguments)]
    pub fn d_geometry(
        &self,
        geo: &VoxelGeometry,
        albedo: &Vector3<f64>,
        pose: &Pose,
        light: &LightState,
        at: EvalAt,
        dn: &Vector3<f64>,
        dx: &Vector3<f64>,
    ) -> Vector3<f64> {
        let image = self.di_dq * pose.rotation.tr_mul(dx);
        let dshade = match light {
            LightState::Sh(l) => Vector3::from_fn(|c, _| Vector3::new(l[c][1], l[c][2], l[c][3]).dot(dn)),
            LightState::Pls(psi) => {
                let x = geo.point(at);
                let dcos = -dn.dot(&(x - pose.translation)) - geo.normal.dot(dx);
                Vector3::repeat(psi * dcos / self.attenuation)
            }
        };
        image - albedo.component_mul(&dshade)
    }

    /// `dr/d(ω, Δt)` under `R ← R exp(-ω)`, `t ← t - Δt`.
    pub fn d_pose(&self, geo: &VoxelGeometry, albedo: &Vector3<f64>, pose: &Pose, light: &LightState) -> Matrix3x6<f64> {
        let d_omega = self.di_dq * -skew(&self.q);
        let mut d_t = self.di_dq * pose.rotation.transpose();
        if let LightState::Pls(psi) = light {
            // the cosine and distance are invariant under rotation about the
            // camera center; translation sees the full attenuation derivative
            let dist = self.q.norm();
            let dq = (pose.rotation * self.q).transpose() * (3.0 * self.cos / (dist * dist * dist * dist * dist));
            let row = (geo.normal.transpose() / self.attenuation + dq) * *psi;
            for c in 0..3 {
                let r = d_t.row(c) + row * albedo[c];
                d_t.set_row(c, &r);
            }
        }
        let mut j = Matrix3x6::zeros();
        j.fixed_columns_mut::<3>(0).copy_from(&d_omega);
        j.fixed_columns_mut::<3>(3).copy_from(&d_t);
        j
    }
}
