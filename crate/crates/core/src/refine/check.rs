//! Finite-difference verification of the analytic residual Jacobians.

use nalgebra::{DMatrix, Matrix3x2, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{evaluate_pair, EvalAt, PairEval, VoxelGeometry};
use crate::error::Result;
use crate::geometry::{Intrinsics, Pose};
use crate::image::{IntensitySample, IntensitySampler};
use crate::shading::{LightState, ShadingModel};
use crate::synth::random_unit;
use crate::volume::GradientStencil;

/// Smooth closed-form image with exact derivatives; bilinear interpolation
/// has kinks at pixel boundaries that would swamp finite differences.
#[derive(Debug, Clone, Copy)]
pub struct SmoothImage {
    pub width: usize,
    pub height: usize,
    pub freq: [Vector2<f64>; 3],
    pub phase: [f64; 3],
}

impl SmoothImage {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let freq = std::array::from_fn(|_| Vector2::new(rng.random_range(0.02..0.08), rng.random_range(0.02..0.08)));
        let phase = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        Self { width, height, freq, phase }
    }
}

impl IntensitySampler for SmoothImage {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn sample(&self, px: &Vector2<f64>) -> Result<IntensitySample> {
        let mut value = Vector3::zeros();
        let mut grad = Matrix3x2::zeros();
        for c in 0..3 {
            let a = self.freq[c].dot(px) + self.phase[c];
            value[c] = 0.5 + 0.3 * a.sin();
            let d = 0.3 * a.cos();
            grad[(c, 0)] = d * self.freq[c].x;
            grad[(c, 1)] = d * self.freq[c].y;
        }
        Ok(IntensitySample { value, grad })
    }
}

/// Largest relative Jacobian error per parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JacobianErrors {
    pub albedo: f64,
    pub light: f64,
    pub psi: f64,
    pub omega: f64,
    pub translation: f64,
    /// Configurations actually checked.
    pub configs: usize,
}

impl JacobianErrors {
    pub fn max(&self) -> f64 {
        [self.albedo, self.light, self.psi, self.omega, self.translation]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

struct Config {
    stencil: GradientStencil,
    center: Vector3<f64>,
    psi: f64,
    albedo: Vector3<f64>,
    pose: Pose,
    light: LightState,
    k: Intrinsics,
    image: SmoothImage,
}

impl Config {
    fn geometry(&self, psi: f64) -> Option<VoxelGeometry> {
        let (normal, dnormal) = self.stencil.normal_and_derivative(psi).ok()?;
        Some(VoxelGeometry { center: self.center, psi, normal, dnormal })
    }

    fn eval(&self, psi: f64, albedo: &Vector3<f64>, pose: &Pose, light: &LightState, atten: Option<f64>) -> Option<PairEval> {
        let geo = self.geometry(psi)?;
        evaluate_pair(&geo, albedo, pose, light, &self.image, &self.k, EvalAt::SurfacePoint, atten)
    }
}

/// Random configuration whose surface point faces the camera from well
/// inside the image.
fn random_config(rng: &mut ChaCha8Rng, model: ShadingModel) -> Option<Config> {
    let k = Intrinsics::new(140.0, 140.0, 79.5, 59.5, 160, 120);
    let vs = 0.02;
    let normal = random_unit(rng);
    let psi = rng.random_range(-0.4..0.4) * vs;
    // neighbours consistent with a slightly bent plane through the voxel
    let sign = [1.0, 1.0, 1.0].map(|s: f64| if rng.random_bool(0.5) { s } else { -s });
    let neighbor_psi = std::array::from_fn(|a| psi - sign[a] * normal[a] * vs + rng.random_range(-0.1..0.1) * vs);
    let stencil = GradientStencil { neighbor_psi, sign, voxel_size: vs };
    let (n, _) = stencil.normal_and_derivative(psi).ok()?;
    let center = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let x = center - n * psi;
    // camera on the front side of the surface
    let view_dir = (n + random_unit(rng) * 0.5).normalize();
    if view_dir.dot(&n) < 0.4 {
        return None;
    }
    let eye = x + view_dir * rng.random_range(0.6..1.4);
    let target = x + random_unit(rng) * 0.1;
    let pose = Pose::look_at(eye, target, random_unit(rng));
    let light = match model {
        ShadingModel::Sh => {
            let l = Vector4::new(
                rng.random_range(0.2..0.6),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            );
            LightState::Sh([l, l * 0.9, l * 1.1])
        }
        ShadingModel::Pls => LightState::Pls(rng.random_range(0.5..3.0)),
    };
    let albedo = Vector3::new(rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.2..0.9));
    let cfg = Config {
        stencil,
        center,
        psi,
        albedo,
        pose,
        light,
        k,
        image: SmoothImage::new(160, 120, rng.random()),
    };
    let e = cfg.eval(psi, &albedo, &pose, &light, None)?;
    let px = k.project(&e.q).ok()?;
    let margin = 10.0;
    if px.x < margin || px.y < margin || px.x > 160.0 - margin || px.y > 120.0 - margin {
        return None;
    }
    if model == ShadingModel::Pls && e.cos / e.q.norm() < 0.2 {
        return None;
    }
    Some(cfg)
}

fn rel_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(1e-6)
}

/// Central differences of the residual over `n` parameters.
fn numeric(n: usize, h: f64, f: impl Fn(usize, f64) -> Option<Vector3<f64>>) -> Option<DMatrix<f64>> {
    let mut m = DMatrix::zeros(3, n);
    for p in 0..n {
        let d = (f(p, h)? - f(p, -h)?) / (2.0 * h);
        m.set_column(p, &d);
    }
    Some(m)
}

fn check_one(cfg: &Config) -> Option<[f64; 5]> {
    let base = cfg.eval(cfg.psi, &cfg.albedo, &cfg.pose, &cfg.light, None)?;
    let geo = cfg.geometry(cfg.psi)?;
    // attenuation frozen at the base configuration, as the distance step
    // does; the pose Jacobian differentiates it fully
    let lag = match cfg.light {
        LightState::Pls(_) => Some(base.attenuation),
        LightState::Sh(_) => None,
    };
    let rel = 1e-5;

    let ja = DMatrix::from_iterator(3, 3, base.d_albedo().iter().copied());
    // linear in ρ, so a large step has no truncation error and less rounding
    let jn = numeric(3, 1e-2, |p, h| {
        let mut a = cfg.albedo;
        let scale = a[p].abs().max(1.0);
        a[p] += h * scale;
        Some(cfg.eval(cfg.psi, &a, &cfg.pose, &cfg.light, lag)?.residual / scale)
    })?;
    let e_albedo = rel_error(&ja, &jn);

    let (jl, jln) = match cfg.light {
        LightState::Sh(l) => {
            // per-channel lighting: 12 columns, channel c depends only on l[c]
            let mut a = DMatrix::zeros(3, 12);
            let d = base.d_sh_light(&cfg.albedo, &geo.normal);
            for c in 0..3 {
                for p in 0..4 {
                    a[(c, 4 * c + p)] = d[(c, p)];
                }
            }
            let n = numeric(12, rel, |p, h| {
                let mut l2 = l;
                let scale = l2[p / 4][p % 4].abs().max(1.0);
                l2[p / 4][p % 4] += h * scale;
                Some(cfg.eval(cfg.psi, &cfg.albedo, &cfg.pose, &LightState::Sh(l2), lag)?.residual / scale)
            })?;
            (a, n)
        }
        LightState::Pls(psi) => {
            let a = DMatrix::from_column_slice(3, 1, base.d_pls_intensity(&cfg.albedo).as_slice());
            let n = numeric(1, rel, |_, h| {
                let scale = psi.abs().max(1.0);
                Some(cfg.eval(cfg.psi, &cfg.albedo, &cfg.pose, &LightState::Pls(psi + h * scale), lag)?.residual / scale)
            })?;
            (a, n)
        }
    };
    let e_light = rel_error(&jl, &jln);

    let jp = base.d_psi(&geo, &cfg.albedo, &cfg.pose, &cfg.light, EvalAt::SurfacePoint);
    let jp = DMatrix::from_column_slice(3, 1, jp.as_slice());
    let vs = cfg.stencil.voxel_size;
    let jpn = numeric(1, rel, |_, h| {
        let scale = vs;
        Some(cfg.eval(cfg.psi + h * scale, &cfg.albedo, &cfg.pose, &cfg.light, lag)?.residual / scale)
    })?;
    let e_psi = rel_error(&jp, &jpn);

    let jc = base.d_pose(&geo, &cfg.albedo, &cfg.pose, &cfg.light);
    let jw = DMatrix::from_iterator(3, 3, jc.fixed_columns::<3>(0).iter().copied());
    let jt = DMatrix::from_iterator(3, 3, jc.fixed_columns::<3>(3).iter().copied());
    let jwn = numeric(3, rel, |p, h| {
        let mut w = Vector3::zeros();
        w[p] = h;
        let pose = cfg.pose.retract(&w, &Vector3::zeros());
        Some(cfg.eval(cfg.psi, &cfg.albedo, &pose, &cfg.light, lag)?.residual)
    })?;
    let jtn = numeric(3, rel, |p, h| {
        let mut d = Vector3::zeros();
        d[p] = h;
        let pose = cfg.pose.retract(&Vector3::zeros(), &d);
        Some(cfg.eval(cfg.psi, &cfg.albedo, &pose, &cfg.light, None)?.residual)
    })?;
    Some([e_albedo, e_light, e_psi, rel_error(&jw, &jwn), rel_error(&jt, &jtn)])
}

/// Compare analytic residual Jacobians against central differences on
/// `configs` random non-degenerate configurations.
pub fn jacobians_fd_check(model: ShadingModel, configs: usize, seed: u64) -> JacobianErrors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = JacobianErrors::default();
    let mut attempts = 0;
    while out.configs < configs && attempts < configs * 100 {
        attempts += 1;
        let Some(cfg) = random_config(&mut rng, model) else {
            continue;
        };
        let Some(e) = check_one(&cfg) else {
            continue;
        };
        out.albedo = out.albedo.max(e[0]);
        out.light = out.light.max(e[1]);
        out.psi = out.psi.max(e[2]);
        out.omega = out.omega.max(e[3]);
        out.translation = out.translation.max(e[4]);
        out.configs += 1;
    }
    out
}
