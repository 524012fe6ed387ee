//! Analytic ground-truth scenes: exact SDFs, sphere-traced RGB-D renders,
//! Kinect-style depth noise and a Monte-Carlo irradiance reference.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Rotation3, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::{Intrinsics, Pose};
use crate::image::{ColorImage, DepthImage, IntensitySample, IntensitySampler};
use crate::shading::{self, LightState, ShadingModel};
use crate::volume::VoxelGrid;

/// Sphere-tracing step cap.
pub const MAX_TRACE_STEPS: usize = 64;
/// Sphere-tracing convergence tolerance in meters.
pub const TRACE_TOLERANCE: f64 = 1e-6;

/// Shapes with exact signed distance functions.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Torus around an axis parallel to world y.
    Torus { center: Vector3<f64>, major: f64, minor: f64 },
    /// Half-space boundary `n·x = offset`, positive on the `n` side.
    Plane { normal: Vector3<f64>, offset: f64 },
    Union(Vec<Shape>),
}

impl Shape {
    /// Signed distance and its unit gradient.
    pub fn sdf(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match self {
            Shape::Sphere { center, radius } => {
                let p = x - center;
                let r = p.norm();
                let g = if r > 0.0 { p / r } else { Vector3::z() };
                (r - radius, g)
            }
            Shape::Torus { center, major, minor } => {
                let p = x - center;
                let rho = (p.x * p.x + p.z * p.z).sqrt();
                let radial = if rho > 0.0 {
                    Vector3::new(p.x / rho, 0.0, p.z / rho)
                } else {
                    Vector3::x()
                };
                let q = Vector2::new(rho - major, p.y);
                let qn = q.norm();
                let g = if qn > 0.0 {
                    (radial * q.x + Vector3::y() * q.y) / qn
                } else {
                    Vector3::y()
                };
                (qn - minor, g)
            }
            Shape::Plane { normal, offset } => (normal.dot(x) - offset, *normal),
            Shape::Union(parts) => parts
                .iter()
                .map(|s| s.sdf(x))
                .fold((f64::INFINITY, Vector3::z()), |best, cur| if cur.0 < best.0 { cur } else { best }),
        }
    }

    pub fn distance(&self, x: &Vector3<f64>) -> f64 {
        self.sdf(x).0
    }
}

/// Reflectance over the surface.
#[derive(Debug, Clone, PartialEq)]
pub enum AlbedoFn {
    Constant(Vector3<f64>),
    Checkerboard { scale: f64, a: Vector3<f64>, b: Vector3<f64> },
    /// Linear blend from `from` at `lo` to `to` at `hi` along a world axis.
    AxisGradient { axis: usize, lo: f64, hi: f64, from: Vector3<f64>, to: Vector3<f64> },
    /// Smooth texture `base (1 + amplitude (sin kx + sin ky + sin kz) / 3)`.
    Waves { base: Vector3<f64>, amplitude: f64, wavelength: f64 },
}

impl AlbedoFn {
    pub fn eval(&self, x: &Vector3<f64>) -> Vector3<f64> {
        match self {
            AlbedoFn::Constant(c) => *c,
            AlbedoFn::Checkerboard { scale, a, b } => {
                let parity = (x / *scale).map(f64::floor).iter().sum::<f64>() as i64;
                if parity.rem_euclid(2) == 0 { *a } else { *b }
            }
            AlbedoFn::AxisGradient { axis, lo, hi, from, to } => {
                let s = ((x[*axis] - lo) / (hi - lo)).clamp(0.0, 1.0);
                from * (1.0 - s) + to * s
            }
            AlbedoFn::Waves { base, amplitude, wavelength } => {
                let k = std::f64::consts::TAU / wavelength;
                let w = ((k * x.x).sin() + (k * x.y).sin() + (k * x.z).sin()) / 3.0;
                base * (1.0 + amplitude * w)
            }
        }
    }
}

/// Ground-truth lighting for a sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Lighting {
    /// World-frame SH vector whose directional part spins about world y by
    /// `spin` radians per frame.
    Sh { world: Vector4<f64>, spin: f64 },
    /// Point light at the camera center.
    Pls { intensity: f64 },
}

impl Lighting {
    pub fn model(&self) -> ShadingModel {
        match self {
            Lighting::Sh { .. } => ShadingModel::Sh,
            Lighting::Pls { .. } => ShadingModel::Pls,
        }
    }

    /// World-frame SH vector of frame `i`.
    pub fn world_sh(&self, i: usize) -> Option<Vector4<f64>> {
        match self {
            Lighting::Sh { world, spin } => {
                let r = Rotation3::from_axis_angle(&Vector3::y_axis(), spin * i as f64);
                let v = r * Vector3::new(world[1], world[2], world[3]);
                Some(Vector4::new(world[0], v.x, v.y, v.z))
            }
            Lighting::Pls { .. } => None,
        }
    }

    /// Light state of frame `i` seen from `pose`.
    pub fn state(&self, i: usize, pose: &Pose) -> LightState {
        match self {
            Lighting::Sh { .. } => {
                LightState::sh(shading::sh_to_camera(&self.world_sh(i).unwrap(), &pose.rotation))
            }
            Lighting::Pls { intensity } => LightState::Pls(*intensity),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub shape: Shape,
    pub albedo: AlbedoFn,
}

/// Ray hit against an analytic scene.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl AnalyticScene {
    /// Desk-sized scene: a central sphere with a torus and a small sphere
    /// placed off-center so that depth-only tracking is well posed. Gaps
    /// between the objects exceed twice the default truncation.
    pub fn desk() -> Self {
        Self {
            shape: Shape::Union(vec![
                Shape::Sphere { center: Vector3::zeros(), radius: 0.3 },
                Shape::Torus { center: Vector3::new(0.8, -0.2, 0.2), major: 0.25, minor: 0.08 },
                Shape::Sphere { center: Vector3::new(-0.52, -0.15, -0.4), radius: 0.15 },
            ]),
            albedo: AlbedoFn::Checkerboard {
                scale: 0.15,
                a: Vector3::new(0.75, 0.6, 0.45),
                b: Vector3::new(0.45, 0.55, 0.7),
            },
        }
    }

    /// Sphere-trace a ray; `dir` must be unit length.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_dist: f64) -> Option<Hit> {
        let mut t = 0.0;
        let mut hit = false;
        for _ in 0..MAX_TRACE_STEPS {
            let d = self.shape.distance(&(origin + dir * t));
            if d.abs() < TRACE_TOLERANCE {
                hit = true;
                break;
            }
            t += d;
            if !(0.0..=max_dist).contains(&t) {
                return None;
            }
        }
        if !hit {
            return None;
        }
        // a few Newton steps along the ray polish the hit to machine precision
        for _ in 0..3 {
            let (d, g) = self.shape.sdf(&(origin + dir * t));
            let slope = g.dot(dir);
            if slope.abs() < 1e-6 {
                break;
            }
            t -= d / slope;
        }
        let point = origin + dir * t;
        Some(Hit { point, normal: self.shape.sdf(&point).1 })
    }

    /// Intensity of a world point under `light` seen from `pose`.
    pub fn shade(&self, hit: &Hit, pose: &Pose, light: &LightState) -> Result<Vector3<f64>> {
        shading::render(&self.albedo.eval(&hit.point), &hit.normal, &hit.point, pose, light)
    }

    /// Ray through pixel `px` in world coordinates.
    fn pixel_ray(k: &Intrinsics, pose: &Pose, px: &Vector2<f64>) -> Vector3<f64> {
        let d = Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0);
        (pose.rotation * d).normalize()
    }

    /// First surface hit along the ray through pixel `px`.
    pub fn cast_pixel(&self, k: &Intrinsics, pose: &Pose, px: &Vector2<f64>) -> Option<Hit> {
        self.cast(&pose.translation, &Self::pixel_ray(k, pose, px), RENDER_FAR)
    }

    /// Sample an analytic grid of this scene's SDF.
    pub fn grid(&self, voxel_size: f64, truncation: f64, lo: Vector3<f64>, hi: Vector3<f64>) -> VoxelGrid {
        let mut grid = VoxelGrid::from_sdf(voxel_size, Vector3::zeros(), truncation, lo, hi, truncation, |x| {
            self.shape.sdf(x)
        });
        let centers: Vec<_> = grid.keys().iter().map(|k| grid.voxel_center(k)).collect();
        for (rec, c) in grid.records_mut().iter_mut().zip(centers) {
            rec.albedo = self.albedo.eval(&(c - rec.grad * rec.psi));
        }
        grid
    }
}

const RENDER_FAR: f64 = 20.0;

/// Output of [`render_frame`].
#[derive(Debug, Clone)]
pub struct Rendered {
    pub color: ColorImage,
    pub depth: DepthImage,
    /// World-frame unit normals; `None` where the ray missed.
    pub normals: Vec<Option<Vector3<f64>>>,
}

/// Sphere-trace every pixel; color is clamped to [0, 1], misses are black
/// with invalid depth.
pub fn render_frame(scene: &AnalyticScene, k: &Intrinsics, pose: &Pose, light: &LightState) -> Rendered {
    let (w, h) = (k.width, k.height);
    let rows: Vec<Vec<(f64, [f64; 3], Option<Vector3<f64>>)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let px = Vector2::new(x as f64, y as f64);
                    match scene.cast_pixel(k, pose, &px) {
                        Some(hit) => {
                            let z = pose.world_to_cam(&hit.point).z;
                            let c = scene.shade(&hit, pose, light).unwrap_or_else(|_| Vector3::zeros());
                            (z, [c.x, c.y, c.z], Some(hit.normal))
                        }
                        None => (0.0, [0.0; 3], None),
                    }
                })
                .collect()
        })
        .collect();
    let flat: Vec<_> = rows.into_iter().flatten().collect();
    Rendered {
        color: ColorImage::from_fn(w, h, |x, y| flat[y * w + x].1),
        depth: DepthImage::from_fn(w, h, |x, y| flat[y * w + x].0),
        normals: flat.iter().map(|p| p.2).collect(),
    }
}

/// Axial noise standard deviation `0.0012 + 0.0019 (z - 0.4)²` in meters.
pub fn kinect_sigma(z: f64) -> f64 {
    0.0012 + 0.0019 * (z - 0.4) * (z - 0.4)
}

/// Add axial Gaussian noise scaled by `scale`; each row draws from its own
/// stream so the result is independent of scheduling.
pub fn kinect_noise(depth: &DepthImage, seed: u64, scale: f64) -> DepthImage {
    let (w, h) = (depth.width(), depth.height());
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(y as u64);
            let unit = Normal::new(0.0, 1.0).unwrap();
            (0..w)
                .map(|x| {
                    let n: f64 = unit.sample(&mut rng);
                    match depth.get(x, y) {
                        Some(z) => {
                            let noisy = z + n * kinect_sigma(z) * scale;
                            if noisy > 0.0 { noisy } else { 0.0 }
                        }
                        None => 0.0,
                    }
                })
                .collect()
        })
        .collect();
    DepthImage::from_fn(w, h, |x, y| rows[y][x])
}

/// Camera poses on a horizontal circular arc around `target`, all looking at it.
pub fn orbit(
    target: Vector3<f64>,
    radius: f64,
    height: f64,
    n_frames: usize,
    arc_degrees: f64,
) -> Vec<Pose> {
    let step = if n_frames > 1 {
        arc_degrees.to_radians() / (n_frames - 1) as f64
    } else {
        0.0
    };
    // a full circle would otherwise repeat the first pose
    let step = if (arc_degrees - 360.0).abs() < 1e-9 { 2.0 * PI / n_frames as f64 } else { step };
    (0..n_frames)
        .map(|i| {
            let a = step * i as f64;
            let eye = target + Vector3::new(radius * a.sin(), height, -radius * a.cos());
            Pose::look_at(eye, target, Vector3::y())
        })
        .collect()
}

/// Timestamp of frame `i`, exactly representable in 6-decimal text.
pub fn frame_timestamp(i: usize) -> f64 {
    (1_000_000 + 33_333 * i as u64) as f64 / 1e6
}

/// Everything needed to synthesize a sequence.
#[derive(Debug, Clone)]
pub struct SequenceSpec {
    pub scene: AnalyticScene,
    pub intrinsics: Intrinsics,
    pub trajectory: Vec<Pose>,
    pub lighting: Lighting,
    /// `None` for noise-free depth, otherwise `(seed, sigma scale)`.
    pub noise: Option<(u64, f64)>,
}

impl SequenceSpec {
    /// The desk scene orbited on a 120° arc at 160×120.
    pub fn desk(n_frames: usize, model: ShadingModel, noise: Option<(u64, f64)>) -> Self {
        let intrinsics = Intrinsics::new(140.0, 140.0, 79.5, 59.5, 160, 120);
        let lighting = match model {
            ShadingModel::Sh => Lighting::Sh {
                world: Vector4::new(0.6, 0.2, 0.35, -0.2),
                spin: 0.15,
            },
            ShadingModel::Pls => Lighting::Pls { intensity: 2.5 },
        };
        Self {
            scene: AnalyticScene::desk(),
            intrinsics,
            trajectory: orbit(Vector3::new(0.15, -0.05, 0.0), 1.8, 0.7, n_frames, 120.0),
            lighting,
            noise,
        }
    }
}

impl SequenceSpec {
    /// A lone checkered sphere of radius 0.4 seen from a full circle, at
    /// 160×120 under point-light or SH lighting.
    pub fn sphere(n_frames: usize, model: ShadingModel, noise: Option<(u64, f64)>) -> Self {
        let mut spec = Self::desk(n_frames, model, noise);
        spec.scene = AnalyticScene {
            shape: Shape::Sphere { center: Vector3::zeros(), radius: 0.4 },
            albedo: spec.scene.albedo,
        };
        spec.trajectory = orbit(Vector3::zeros(), 1.5, 0.5, n_frames, 360.0);
        spec
    }
}

/// A rendered sequence with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    /// Frames carrying ground-truth poses and lights.
    pub frames: Vec<Frame>,
    pub intrinsics: Intrinsics,
    /// Noise-free surface points seen by any frame.
    pub gt_cloud: Vec<Vector3<f64>>,
}

impl SyntheticSequence {
    pub fn gt_poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }
}

/// Render all frames; color is quantized to 8 bits and depth to the
/// intrinsics' depth scale so the sequence survives a dataset round trip.
pub fn generate(spec: &SequenceSpec) -> SyntheticSequence {
    let k = spec.intrinsics;
    let mut frames = Vec::with_capacity(spec.trajectory.len());
    let mut gt_cloud = Vec::new();
    for (i, pose) in spec.trajectory.iter().enumerate() {
        let light = spec.lighting.state(i, pose);
        let r = render_frame(&spec.scene, &k, pose, &light);
        for y in 0..k.height {
            for x in 0..k.width {
                if let Some(z) = r.depth.get(x, y) {
                    let p = k.backproject(&Vector2::new(x as f64, y as f64), z).unwrap();
                    gt_cloud.push(pose.apply(&p));
                }
            }
        }
        let depth = match spec.noise {
            Some((seed, scale)) => kinect_noise(&r.depth, seed.wrapping_add(i as u64 * 0x9E37_79B9), scale),
            None => r.depth,
        };
        let mut frame = Frame::new(frame_timestamp(i), r.color.quantized(), depth.quantized(k.depth_scale));
        frame.pose = *pose;
        frame.light = Some(light);
        frames.push(frame);
    }
    SyntheticSequence { frames, intrinsics: k, gt_cloud }
}

/// Exact intensity field of one view, obtained by casting a ray per query.
/// Used where bilinear interpolation error would mask the quantity under test.
pub struct AnalyticView<'a> {
    pub scene: &'a AnalyticScene,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub light: LightState,
}

impl AnalyticView<'_> {
    fn value(&self, px: &Vector2<f64>) -> Result<Vector3<f64>> {
        let hit = self
            .scene
            .cast_pixel(&self.intrinsics, &self.pose, px)
            .ok_or(Error::SampleOutOfImage(px.x, px.y))?;
        self.scene.shade(&hit, &self.pose, &self.light)
    }
}

impl IntensitySampler for AnalyticView<'_> {
    fn width(&self) -> usize {
        self.intrinsics.width
    }

    fn height(&self) -> usize {
        self.intrinsics.height
    }

    fn sample(&self, px: &Vector2<f64>) -> Result<IntensitySample> {
        let (w, h) = (self.width() as f64, self.height() as f64);
        if !(px.x >= 1.0 && px.y >= 1.0 && px.x <= w - 2.0 && px.y <= h - 2.0) {
            return Err(Error::SampleOutOfImage(px.x, px.y));
        }
        let value = self.value(px)?;
        let e = 1e-3;
        let dx = (self.value(&(px + Vector2::new(e, 0.0)))? - self.value(&(px - Vector2::new(e, 0.0)))?) / (2.0 * e);
        let dy = (self.value(&(px + Vector2::new(0.0, e)))? - self.value(&(px - Vector2::new(0.0, e)))?) / (2.0 * e);
        Ok(IntensitySample {
            value,
            grad: nalgebra::Matrix3x2::from_columns(&[dx, dy]),
        })
    }
}

/// Monte-Carlo estimate of `∫ L(ω) max(⟨ω, n⟩, 0) dω` over the sphere.
pub fn brute_force_irradiance(
    n: &Vector3<f64>,
    env: impl Fn(&Vector3<f64>) -> f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..samples {
        let d: [f64; 3] = UnitSphere.sample(&mut rng);
        let d = Vector3::from(d);
        acc += env(&d) * d.dot(n).max(0.0);
    }
    4.0 * PI * acc / samples as f64
}

/// Least-squares first-order SH vector reproducing `values` at `normals`.
pub fn fit_first_order_sh(normals: &[Vector3<f64>], values: &[f64]) -> Result<Vector4<f64>> {
    let mut ata = Matrix4::zeros();
    let mut atb = Vector4::zeros();
    for (n, v) in normals.iter().zip(values) {
        let b = shading::sh_basis(n);
        ata += b * b.transpose();
        atb += b * *v;
    }
    ata.cholesky()
        .map(|c| c.solve(&atb))
        .ok_or_else(|| Error::InvalidArgument("normals do not span the SH basis".into()))
}

/// Random unit vector from `rng`.
pub fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    let d: [f64; 3] = UnitSphere.sample(rng);
    Vector3::from(d)
}
