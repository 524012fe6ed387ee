//! Joint photometric refinement of distances, albedo, lighting and poses.
//!
//! Blocks alternate in the order albedo, lighting, distance, pose. Each block
//! is an iteratively reweighted least-squares step under the Cauchy
//! estimator; the albedo and lighting steps are closed form, the distance and
//! pose steps are damped Gauss-Newton steps that are only kept if the energy
//! does not rise.

mod check;
mod model;
#[cfg(test)]
mod tests;

use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{Matrix4, Matrix6, SymmetricEigen, Vector3, Vector4, Vector6};
use rayon::prelude::*;

pub use check::{jacobians_fd_check, JacobianErrors, SmoothImage};
pub use model::{evaluate_pair, EvalAt, PairEval, VoxelGeometry};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::fusion::{self, FusionParams, NormalMap};
use crate::geometry::{Intrinsics, Pose};
use crate::image::{DepthImage, IntensitySampler};
use crate::shading::{sh_basis, sh_to_camera, sh_to_world, LightState, ShadingModel};
use crate::volume::VoxelGrid;

/// Frames with fewer visible voxels keep their pose.
pub const MIN_POSE_VOXELS: usize = 50;
/// Damping escalations tried before a distance step is given up.
const MAX_DISTANCE_RETRIES: usize = 6;
const MAX_POSE_DAMPING: f64 = 1e6;
const MIN_POSE_DAMPING: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub model: ShadingModel,
    /// Scale of the Cauchy estimator, in intensity units.
    pub sigma: f64,
    /// Levenberg damping on the diagonal of `JᵀWJ`.
    pub gn_damping: f64,
    pub eikonal_weight: f64,
    /// Relative energy change below which the outer loop stops.
    pub convergence_tol: f64,
    pub max_iters: usize,
    /// Subdivide the grid once after this many iterations; 0 disables.
    pub upsample_at_iter: usize,
    pub eval_at: EvalAt,
    pub eikonal: bool,
    pub refine_poses: bool,
    /// Separate SH vectors per color channel instead of one shared vector.
    pub per_channel_light: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            model: ShadingModel::Sh,
            sigma: 0.2,
            gn_damping: 0.1,
            eikonal_weight: 1.0,
            convergence_tol: 1e-3,
            max_iters: 20,
            upsample_at_iter: 5,
            eval_at: EvalAt::SurfacePoint,
            eikonal: true,
            refine_poses: false,
            per_channel_light: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.convergence_tol > 0.0 && self.gn_damping >= 0.0 && self.eikonal_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid refinement settings {self:?}")));
        }
        Ok(())
    }

    fn eikonal_weight(&self) -> f64 {
        if self.eikonal {
            self.eikonal_weight
        } else {
            0.0
        }
    }
}

/// IRLS weight of the Cauchy estimator, `1 / (1 + r²/σ²)`.
pub fn cauchy_weight(r: f64, sigma: f64) -> f64 {
    1.0 / (1.0 + r * r / (sigma * sigma))
}

/// Cauchy cost `σ² log(1 + r²/σ²)`, which behaves like `r²` near zero.
pub fn cauchy_cost(r: f64, sigma: f64) -> f64 {
    sigma * sigma * (r * r / (sigma * sigma)).ln_1p()
}

/// Energy split of one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Energy {
    pub data: f64,
    pub eikonal: f64,
    pub total: f64,
}

/// One row of the refinement log.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyEntry {
    pub iteration: usize,
    pub energy: Energy,
    /// Total energy at the start of the iteration, after any up-sampling.
    pub start_total: f64,
    pub albedo_step: f64,
    pub light_step: f64,
    pub distance_step: f64,
    pub pose_step: f64,
    pub seconds: f64,
    /// The grid was subdivided at the start of this iteration.
    pub upsampled: bool,
    /// Voxels taking part in the energy.
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnergyReport {
    pub entries: Vec<EnergyEntry>,
}

impl EnergyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "iteration,data,eikonal,total,albedo_step,light_step,distance_step,pose_step,seconds,upsampled,voxels\n",
        );
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{:.12e},{:.12e},{:.12e},{:.6e},{:.6e},{:.6e},{:.6e},{:.3},{},{}",
                e.iteration,
                e.energy.data,
                e.energy.eikonal,
                e.energy.total,
                e.albedo_step,
                e.light_step,
                e.distance_step,
                e.pose_step,
                e.seconds,
                u8::from(e.upsampled),
                e.voxels
            );
        }
        s
    }

    /// Same as [`Self::to_csv`] without the wall-clock column, for comparing runs.
    pub fn to_csv_without_timing(&self) -> String {
        self.to_csv()
            .lines()
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                let mut kept: Vec<&str> = cols[..8].to_vec();
                kept.extend_from_slice(&cols[9..]);
                kept.join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// True if no iteration raised the energy it started from, and energies
    /// only jump at up-sampling.
    pub fn is_monotone(&self) -> bool {
        self.entries.windows(2).all(|w| {
            let (prev, cur) = (&w[0], &w[1]);
            let tol = 1e-9 * prev.energy.total.abs().max(1e-12);
            let start_ok = cur.upsampled || (cur.start_total - prev.energy.total).abs() <= tol;
            start_ok && cur.energy.total <= cur.start_total + tol
        })
    }

    pub fn final_energy(&self) -> Option<Energy> {
        self.entries.last().map(|e| e.energy)
    }
}

/// Lights CSV: `frame_index,model,c0,c1,...`.
pub fn lights_csv(lights: &[LightState]) -> String {
    let mut s = String::from("frame_index,model,coefficients\n");
    for (i, l) in lights.iter().enumerate() {
        let coeffs: Vec<String> = l.coefficients().iter().map(|c| format!("{c:.9e}")).collect();
        let _ = writeln!(s, "{i},{},{}", l.model().name(), coeffs.join(","));
    }
    s
}

/// Depth frames used to re-check visibility after pose updates.
struct DepthSupport<'a> {
    depths: Vec<&'a DepthImage>,
    normals: Vec<NormalMap>,
    params: FusionParams,
}

/// Outcome of a lighting step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LightStep {
    pub step: f64,
    /// Frames whose SH normal matrix was rank deficient and got regularized.
    pub degenerate: Vec<usize>,
}

/// Refinement state: the grid, per-frame poses and world-frame lighting
/// (`l̂ = (l₀, R l₁..₃)` for SH), plus the images they are fitted to.
pub struct Refinement<'a, V: IntensitySampler> {
    views: &'a [V],
    intrinsics: Intrinsics,
    config: RefineConfig,
    grid: VoxelGrid,
    poses: Vec<Pose>,
    lights: Vec<LightState>,
    /// Slots of the voxels in the energy, in index order.
    active: Vec<usize>,
    /// For every grid slot, its position in `active`.
    active_pos: Vec<Option<usize>>,
    /// For every frame, positions (into `active`) of the voxels it sees.
    frame_voxels: Vec<Vec<usize>>,
    /// Per-frame pose damping, carried between pose steps.
    pose_damping: Vec<f64>,
    depth: Option<DepthSupport<'a>>,
}

impl<'a, V: IntensitySampler> Refinement<'a, V> {
    /// Set up a refinement. Visibility bits already in the grid are used as
    /// is; `lights` are world-frame.
    pub fn new(
        grid: VoxelGrid,
        views: &'a [V],
        intrinsics: Intrinsics,
        poses: Vec<Pose>,
        lights: Vec<LightState>,
        config: RefineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if views.len() != poses.len() || views.len() != lights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} views, {} poses and {} lights",
                views.len(),
                poses.len(),
                lights.len()
            )));
        }
        if lights.iter().any(|l| l.model() != config.model) {
            return Err(Error::InvalidArgument("lighting does not match the shading model".into()));
        }
        let mut r = Self {
            views,
            intrinsics,
            config,
            grid,
            poses,
            lights,
            active: Vec::new(),
            active_pos: Vec::new(),
            frame_voxels: Vec::new(),
            pose_damping: vec![config.gn_damping; views.len()],
            depth: None,
        };
        r.select_active();
        Ok(r)
    }

    /// Attach depth frames so visibility can be pruned after pose updates.
    pub fn with_depth(mut self, depths: Vec<&'a DepthImage>, params: FusionParams) -> Self {
        let normals = depths.iter().map(|d| fusion::depth_normals(d, &self.intrinsics)).collect();
        self.depth = Some(DepthSupport { depths, normals, params });
        self
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn lights(&self) -> &[LightState] {
        &self.lights
    }

    pub fn config(&self) -> &RefineConfig {
        &self.config
    }

    pub fn active_voxels(&self) -> usize {
        self.active.len()
    }

    pub fn into_parts(self) -> (VoxelGrid, Vec<Pose>, Vec<LightState>) {
        (self.grid, self.poses, self.lights)
    }

    pub fn set_poses(&mut self, poses: Vec<Pose>) {
        assert_eq!(poses.len(), self.poses.len());
        self.poses = poses;
    }

    pub fn set_lights(&mut self, lights: Vec<LightState>) {
        assert_eq!(lights.len(), self.lights.len());
        self.lights = lights;
    }

    /// Voxels within one voxel of the surface.
    fn select_active(&mut self) {
        let band = self.grid.voxel_size();
        self.active = self
            .grid
            .surface_voxels(band)
            .iter()
            .filter_map(|idx| self.grid.slot(idx))
            .collect();
        self.active_pos = vec![None; self.grid.len()];
        for (p, &s) in self.active.iter().enumerate() {
            self.active_pos[s] = Some(p);
        }
        self.rebuild_frame_lists();
    }

    fn sync_normals(&mut self) {
        let normals: Vec<Option<Vector3<f64>>> = self
            .active
            .par_iter()
            .map(|&s| self.grid.normal_from_gradient(&self.grid.keys()[s]).ok())
            .collect();
        let records = self.grid.records_mut();
        for (&s, n) in self.active.iter().zip(normals) {
            if let Some(n) = n {
                records[s].grad = n;
            }
        }
    }

    fn rebuild_frame_lists(&mut self) {
        let mut lists = vec![Vec::new(); self.views.len()];
        for (p, &s) in self.active.iter().enumerate() {
            for i in self.grid.records()[s].visibility.iter() {
                if i < lists.len() {
                    lists[i].push(p);
                }
            }
        }
        self.frame_voxels = lists;
    }

    /// Clear visibility bits that the depth frames no longer support. Bits
    /// are only ever removed, so the energy cannot grow from this.
    fn prune_visibility(&mut self) {
        let Some(depth) = &self.depth else {
            return;
        };
        let t = self.grid.truncation();
        let k = self.intrinsics;
        let cleared: Vec<Vec<usize>> = self
            .active
            .par_iter()
            .map(|&s| {
                let center = self.grid.voxel_center(&self.grid.keys()[s]);
                self.grid.records()[s]
                    .visibility
                    .iter()
                    .filter(|&i| {
                        i >= depth.depths.len()
                            || !fusion::is_visible(
                                &center,
                                &self.poses[i],
                                depth.depths[i],
                                &depth.normals[i],
                                &k,
                                &depth.params,
                                t,
                            )
                    })
                    .collect()
            })
            .collect();
        let records = self.grid.records_mut();
        for (&s, frames) in self.active.iter().zip(cleared) {
            for i in frames {
                records[s].visibility.remove(i);
            }
        }
        self.rebuild_frame_lists();
    }

    /// Normals come from the distance stencil so that geometry depends on ψ
    /// alone; voxels without a usable stencil keep their stored gradient.
    fn geometry(&self, slot: usize, with_derivative: bool) -> Option<VoxelGeometry> {
        let idx = &self.grid.keys()[slot];
        let rec = &self.grid.records()[slot];
        let (normal, dnormal) = match self.grid.gradient_stencil(idx).and_then(|st| st.normal_and_derivative(rec.psi)) {
            Ok((n, dn)) => (n, if with_derivative { dn } else { Vector3::zeros() }),
            Err(_) if with_derivative => return None,
            Err(_) => (rec.grad, Vector3::zeros()),
        };
        Some(VoxelGeometry {
            center: self.grid.voxel_center(idx),
            psi: rec.psi,
            normal,
            dnormal,
        })
    }

    fn eval(&self, geo: &VoxelGeometry, albedo: &Vector3<f64>, frame: usize, pose: &Pose) -> Option<PairEval> {
        evaluate_pair(
            geo,
            albedo,
            pose,
            &self.lights[frame],
            &self.views[frame],
            &self.intrinsics,
            self.config.eval_at,
            None,
        )
    }

    fn pair_cost(&self, residual: &Vector3<f64>) -> f64 {
        residual.iter().map(|r| cauchy_cost(*r, self.config.sigma)).sum()
    }

    /// Cost of a visible pair whose sample cannot be evaluated (outside the
    /// image or facing away from the light): a full-range outlier in every
    /// channel, so that losing observations never lowers the energy.
    fn missing_cost(&self) -> f64 {
        3.0 * cauchy_cost(1.0, self.config.sigma)
    }

    fn cost(&self, e: Option<PairEval>) -> f64 {
        e.map_or_else(|| self.missing_cost(), |e| self.pair_cost(&e.residual))
    }

    /// Data energy of one frame at a given pose.
    fn frame_energy(&self, frame: usize, pose: &Pose) -> f64 {
        let costs: Vec<f64> = self.frame_voxels[frame]
            .par_iter()
            .map(|&p| {
                let s = self.active[p];
                let Some(geo) = self.geometry(s, false) else {
                    return 0.0;
                };
                self.cost(self.eval(&geo, &self.grid.records()[s].albedo, frame, pose))
            })
            .collect();
        costs.iter().sum()
    }

    fn data_energy(&self) -> f64 {
        let costs: Vec<f64> = self
            .active
            .par_iter()
            .map(|&s| {
                let rec = &self.grid.records()[s];
                let Some(geo) = self.geometry(s, false) else {
                    return 0.0;
                };
                rec.visibility
                    .iter()
                    .filter(|&i| i < self.views.len())
                    .map(|i| self.cost(self.eval(&geo, &rec.albedo, i, &self.poses[i])))
                    .sum()
            })
            .collect();
        costs.iter().sum()
    }

    /// `Σ (‖∇ψ‖² - 1)²` over the active voxels with a defined gradient.
    pub fn eikonal_energy(&self) -> f64 {
        let terms: Vec<f64> = self
            .active
            .par_iter()
            .map(|&s| {
                self.grid
                    .finite_diff_gradient(&self.grid.keys()[s])
                    .map_or(0.0, |g| (g.norm_squared() - 1.0).powi(2))
            })
            .collect();
        terms.iter().sum()
    }

    pub fn energy(&self) -> Energy {
        let data = self.data_energy();
        let eikonal = self.eikonal_energy();
        Energy {
            data,
            eikonal,
            total: data + self.config.eikonal_weight() * eikonal,
        }
    }

    /// Closed-form weighted least squares for every voxel's albedo.
    pub fn step_albedo(&mut self) -> f64 {
        let sigma = self.config.sigma;
        let updates: Vec<Option<Vector3<f64>>> = self
            .active
            .par_iter()
            .map(|&s| {
                let rec = &self.grid.records()[s];
                let geo = self.geometry(s, false)?;
                let mut num = Vector3::<f64>::zeros();
                let mut den = Vector3::<f64>::zeros();
                for i in rec.visibility.iter().filter(|&i| i < self.views.len()) {
                    let Some(e) = self.eval(&geo, &rec.albedo, i, &self.poses[i]) else {
                        continue;
                    };
                    for c in 0..3 {
                        let w = cauchy_weight(e.residual[c], sigma);
                        num[c] += w * e.shading[c] * e.intensity[c];
                        den[c] += w * e.shading[c] * e.shading[c];
                    }
                }
                Some(Vector3::from_fn(|c, _| {
                    if den[c] < 1e-12 {
                        rec.albedo[c]
                    } else {
                        (num[c] / den[c]).clamp(0.0, 2.0)
                    }
                }))
            })
            .collect();
        let records = self.grid.records_mut();
        let mut sq = 0.0_f64;
        for (&s, u) in self.active.iter().zip(updates) {
            if let Some(a) = u {
                sq += (a - records[s].albedo).norm_squared();
                records[s].albedo = a;
            }
        }
        sq.sqrt()
    }

    /// Closed-form weighted least squares for every frame's lighting.
    pub fn step_light(&mut self) -> LightStep {
        let sigma = self.config.sigma;
        let per_channel = self.config.per_channel_light;
        let results: Vec<(LightState, bool)> = (0..self.views.len())
            .into_par_iter()
            .map(|i| {
                let light = self.lights[i];
                let voxels = &self.frame_voxels[i];
                let pairs: Vec<(Vector3<f64>, Vector3<f64>, PairEval)> = voxels
                    .iter()
                    .filter_map(|&p| {
                        let s = self.active[p];
                        let geo = self.geometry(s, false)?;
                        let albedo = self.grid.records()[s].albedo;
                        let e = self.eval(&geo, &albedo, i, &self.poses[i])?;
                        Some((albedo, geo.normal, e))
                    })
                    .collect();
                if pairs.is_empty() {
                    return (light, false);
                }
                match light {
                    LightState::Sh(current) => {
                        let mut a = [Matrix4::<f64>::zeros(); 3];
                        let mut b = [Vector4::<f64>::zeros(); 3];
                        for (albedo, n, e) in &pairs {
                            let basis = sh_basis(n);
                            for c in 0..3 {
                                let w = cauchy_weight(e.residual[c], sigma);
                                let row = basis * albedo[c];
                                a[c] += row * row.transpose() * w;
                                b[c] += row * (w * e.intensity[c]);
                            }
                        }
                        if per_channel {
                            let mut degenerate = false;
                            let mut out = current;
                            for c in 0..3 {
                                let (l, d) = solve_sh(a[c], b[c]);
                                degenerate |= d;
                                out[c] = l.unwrap_or(current[c]);
                            }
                            (LightState::Sh(out), degenerate)
                        } else {
                            let (l, d) = solve_sh(a[0] + a[1] + a[2], b[0] + b[1] + b[2]);
                            (l.map_or(light, |l| LightState::Sh([l; 3])), d)
                        }
                    }
                    LightState::Pls(_) => {
                        let mut num = 0.0;
                        let mut den = 0.0;
                        for (albedo, _, e) in &pairs {
                            let unit = e.cos / e.attenuation;
                            for c in 0..3 {
                                let w = cauchy_weight(e.residual[c], sigma);
                                let m = albedo[c] * unit;
                                num += w * m * e.intensity[c];
                                den += w * m * m;
                            }
                        }
                        if den < 1e-12 {
                            (light, false)
                        } else {
                            (LightState::Pls((num / den).max(0.0)), false)
                        }
                    }
                }
            })
            .collect();
        let mut out = LightStep::default();
        let mut sq = 0.0;
        for (i, (l, degenerate)) in results.into_iter().enumerate() {
            if degenerate {
                warn!("frame {i}: degenerate lighting, normal matrix regularized");
                out.degenerate.push(i);
            }
            let old = self.lights[i].coefficients();
            sq += l.coefficients().iter().zip(&old).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            self.lights[i] = l;
        }
        out.step = sq.sqrt();
        out
    }

    /// Jacobi sweep of damped Gauss-Newton updates on every active ψ, kept
    /// only if the total energy does not rise (damping grows ×10 otherwise).
    pub fn step_distance(&mut self) -> Result<f64> {
        let sigma = self.config.sigma;
        let vs = self.grid.voxel_size();
        let t = self.grid.truncation();
        let mu = self.config.eikonal_weight();
        let at = self.config.eval_at;

        // Data rows. A voxel's residuals depend on its own distance and,
        // through the stencil normal, on the neighbours in its stencil.
        type Rows = ((f64, f64), [Option<(usize, f64, f64)>; 3]);
        let data: Vec<Rows> = self
            .active
            .par_iter()
            .map(|&s| {
                let rec = &self.grid.records()[s];
                let idx = self.grid.keys()[s];
                let (Some(geo), Ok(stencil)) = (self.geometry(s, true), self.grid.gradient_stencil(&idx)) else {
                    return ((0.0, 0.0), [None; 3]);
                };
                let grad_norm = stencil.gradient(geo.psi).norm();
                let neighbors: [Option<(usize, Vector3<f64>, Vector3<f64>)>; 3] = std::array::from_fn(|a| {
                    let mut n = idx;
                    n[a] -= stencil.sign[a] as i32;
                    let slot = self.grid.slot(&n)?;
                    self.active_pos[slot]?;
                    let mut dg = Vector3::zeros();
                    dg[a] = -stencil.sign[a] / vs;
                    let dn = (dg - geo.normal * geo.normal.dot(&dg)) / grad_norm;
                    let dx = match at {
                        EvalAt::SurfacePoint => -dn * geo.psi,
                        EvalAt::VoxelCenter => Vector3::zeros(),
                    };
                    Some((slot, dn, dx))
                });
                let mut own = (0.0, 0.0);
                let mut nb = [(0.0, 0.0); 3];
                for i in rec.visibility.iter().filter(|&i| i < self.views.len()) {
                    let pose = &self.poses[i];
                    let light = &self.lights[i];
                    let Some(e) = self.eval(&geo, &rec.albedo, i, pose) else {
                        continue;
                    };
                    let w = e.residual.map(|r| cauchy_weight(r, sigma));
                    let j = e.d_psi(&geo, &rec.albedo, pose, light, at);
                    own.0 += (w.component_mul(&j)).dot(&j);
                    own.1 += (w.component_mul(&e.residual)).dot(&j);
                    for (a, n) in neighbors.iter().enumerate() {
                        if let Some((_, dn, dx)) = n {
                            let j = e.d_geometry(&geo, &rec.albedo, pose, light, at, dn, dx);
                            nb[a].0 += (w.component_mul(&j)).dot(&j);
                            nb[a].1 += (w.component_mul(&e.residual)).dot(&j);
                        }
                    }
                }
                (own, std::array::from_fn(|a| neighbors[a].map(|(slot, _, _)| (slot, nb[a].0, nb[a].1))))
            })
            .collect();
        let mut h: Vec<f64> = data.iter().map(|d| d.0 .0).collect();
        let mut b: Vec<f64> = data.iter().map(|d| d.0 .1).collect();
        for (_, nb) in &data {
            for &(slot, hn, bn) in nb.iter().flatten() {
                let p = self.active_pos[slot].expect("neighbour rows are only kept for active voxels");
                h[p] += hn;
                b[p] += bn;
            }
        }

        // Eikonal rows: each voxel's residual depends on itself and on the
        // neighbours in its difference stencil
        if mu > 0.0 {
            for &s in &self.active {
                let idx = self.grid.keys()[s];
                let Ok(stencil) = self.grid.gradient_stencil(&idx) else {
                    continue;
                };
                let psi = self.grid.records()[s].psi;
                let g = stencil.gradient(psi);
                let e = g.norm_squared() - 1.0;
                let own = 2.0 * g.dot(&stencil.gradient_derivative());
                if let Some(p) = self.active_pos[s] {
                    h[p] += mu * own * own;
                    b[p] += mu * e * own;
                }
                for a in 0..3 {
                    let mut n = idx;
                    n[a] -= stencil.sign[a] as i32;
                    let Some(p) = self.grid.slot(&n).and_then(|ns| self.active_pos[ns]) else {
                        continue;
                    };
                    let d = -2.0 * g[a] * stencil.sign[a] / vs;
                    h[p] += mu * d * d;
                    b[p] += mu * e * d;
                }
            }
        }

        let before = self.energy().total;
        let old: Vec<f64> = self
            .active
            .iter()
            .map(|&s| self.grid.records()[s].psi)
            .collect();
        let mut lambda = self.config.gn_damping;
        for _ in 0..MAX_DISTANCE_RETRIES {
            let mut sq = 0.0;
            {
                let records = self.grid.records_mut();
                for (p, &s) in self.active.iter().enumerate() {
                    if h[p] <= 1e-18 {
                        continue;
                    }
                    let delta = (-b[p] / (h[p] * (1.0 + lambda))).clamp(-0.5 * vs, 0.5 * vs);
                    let psi = (old[p] + delta).clamp(-t, t);
                    sq += (psi - old[p]).powi(2);
                    records[s].psi = psi;
                }
            }
            let after = self.energy().total;
            if after.is_nan() {
                return Err(Error::NanEnergy { block: "distance" });
            }
            if after <= before {
                self.sync_normals();
                return Ok(sq.sqrt());
            }
            debug!("distance step raised energy {before:.6e} -> {after:.6e}, damping {lambda:.1e}");
            let records = self.grid.records_mut();
            for (&s, psi) in self.active.iter().zip(&old) {
                records[s].psi = *psi;
            }
            lambda *= 10.0;
        }
        Ok(0.0)
    }

    /// Initial lights under a uniform albedo (the mean over active voxels),
    /// followed by the closed-form albedo for those lights. Averaged colors
    /// carry the shading, so solving the light against them directly leaves
    /// it close to ambient.
    pub fn initialize_lights(&mut self) -> LightStep {
        let n = self.active.len().max(1) as f64;
        let mean = self.active.iter().map(|&s| self.grid.records()[s].albedo).sum::<Vector3<f64>>() / n;
        let records = self.grid.records_mut();
        for &s in &self.active {
            records[s].albedo = mean;
        }
        let step = self.step_light();
        self.step_albedo();
        step
    }

    /// One damped Gauss-Newton step per frame on its pose. The damping starts
    /// at `gn_damping`, is divided by 10 after an accepted step and
    /// multiplied by 10 after a rejected one.
    pub fn step_pose(&mut self) -> f64 {
        let sigma = self.config.sigma;
        let results: Vec<Option<(Pose, f64, f64)>> = (0..self.views.len())
            .into_par_iter()
            .map(|i| {
                let voxels = &self.frame_voxels[i];
                if voxels.len() < MIN_POSE_VOXELS {
                    return None;
                }
                let pose = self.poses[i];
                let light = &self.lights[i];
                let mut h = Matrix6::<f64>::zeros();
                let mut b = Vector6::<f64>::zeros();
                for &p in voxels {
                    let s = self.active[p];
                    let Some(geo) = self.geometry(s, false) else {
                        continue;
                    };
                    let albedo = self.grid.records()[s].albedo;
                    let Some(e) = self.eval(&geo, &albedo, i, &pose) else {
                        continue;
                    };
                    let j = e.d_pose(&geo, &albedo, &pose, light);
                    for c in 0..3 {
                        let w = cauchy_weight(e.residual[c], sigma);
                        let row = j.row(c).transpose();
                        h += row * row.transpose() * w;
                        b += row * (w * e.residual[c]);
                    }
                }
                let before = self.frame_energy(i, &pose);
                let mut lambda = self.pose_damping[i];
                while lambda <= MAX_POSE_DAMPING {
                    let mut damped = h;
                    for d in 0..6 {
                        damped[(d, d)] += lambda * h[(d, d)].max(1e-12);
                    }
                    if let Some(chol) = damped.cholesky() {
                        let delta = -chol.solve(&b);
                        let omega = Vector3::new(delta[0], delta[1], delta[2]);
                        let dt = Vector3::new(delta[3], delta[4], delta[5]);
                        let candidate = pose.retract(&omega, &dt).orthonormalized();
                        if self.frame_energy(i, &candidate) < before {
                            return Some((candidate, delta.norm(), (lambda / 10.0).max(MIN_POSE_DAMPING)));
                        }
                    }
                    lambda *= 10.0;
                }
                Some((pose, 0.0, self.config.gn_damping.max(MIN_POSE_DAMPING)))
            })
            .collect();
        let mut sq = 0.0;
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Some((pose, step, lambda)) => {
                    self.poses[i] = pose;
                    self.pose_damping[i] = lambda;
                    sq += step * step;
                }
                None => warn!(
                    "frame {i}: only {} visible voxels, pose kept",
                    self.frame_voxels[i].len()
                ),
            }
        }
        self.prune_visibility();
        sq.sqrt()
    }

    /// Subdivide the grid and re-select the active voxels.
    pub fn upsample(&mut self) {
        self.grid = self.grid.subdivide();
        self.select_active();
        self.prune_visibility();
    }

    fn checked(&self, block: &'static str) -> Result<Energy> {
        let e = self.energy();
        if e.total.is_nan() || e.data.is_nan() || e.eikonal.is_nan() {
            return Err(Error::NanEnergy { block });
        }
        Ok(e)
    }

    /// Alternate the blocks until the relative energy change drops below
    /// the tolerance or the iteration budget is spent.
    pub fn run(&mut self) -> Result<EnergyReport> {
        let started = Instant::now();
        let mut report = EnergyReport::default();
        let initial = self.checked("initialization")?;
        report.entries.push(EnergyEntry {
            iteration: 0,
            energy: initial,
            start_total: initial.total,
            voxels: self.active.len(),
            seconds: started.elapsed().as_secs_f64(),
            ..Default::default()
        });
        let upsample_at = self.config.upsample_at_iter;
        let mut upsampled_once = false;
        for it in 1..=self.config.max_iters {
            let upsampled = upsample_at > 0 && it == upsample_at + 1;
            if upsampled {
                self.upsample();
                upsampled_once = true;
                info!("up-sampled to voxel size {:.4}, {} active voxels", self.grid.voxel_size(), self.active.len());
            }
            let start_total = self.checked("up-sampling")?.total;
            let albedo_step = self.step_albedo();
            self.checked("albedo")?;
            let light_step = self.step_light().step;
            self.checked("light")?;
            let distance_step = self.step_distance()?;
            self.checked("distance")?;
            let pose_step = if self.config.refine_poses {
                let s = self.step_pose();
                self.checked("pose")?;
                s
            } else {
                0.0
            };
            let energy = self.energy();
            let prev = report.entries.last().map_or(energy.total, |e| e.energy.total);
            report.entries.push(EnergyEntry {
                iteration: it,
                energy,
                start_total,
                albedo_step,
                light_step,
                distance_step,
                pose_step,
                seconds: started.elapsed().as_secs_f64(),
                upsampled,
                voxels: self.active.len(),
            });
            info!(
                "iteration {it}: data {:.6e} eikonal {:.6e} total {:.6e}",
                energy.data, energy.eikonal, energy.total
            );
            let waiting_for_upsample = upsample_at > 0 && !upsampled_once;
            if !upsampled && !waiting_for_upsample {
                let rel = if prev > 0.0 { (prev - energy.total).abs() / prev } else { 0.0 };
                if rel < self.config.convergence_tol {
                    break;
                }
            }
        }
        Ok(report)
    }
}

/// Solve an SH normal system, regularizing when it is rank deficient.
fn solve_sh(a: Matrix4<f64>, b: Vector4<f64>) -> (Option<Vector4<f64>>, bool) {
    let eig = SymmetricEigen::new(a);
    let max = eig.eigenvalues.max().max(0.0);
    let min = eig.eigenvalues.min();
    let degenerate = max <= 0.0 || min <= 1e-9 * max;
    let a = if degenerate { a + Matrix4::identity() * 1e-6 } else { a };
    (a.cholesky().map(|c| c.solve(&b)), degenerate)
}

/// Result of refining a fused reconstruction against its frames.
#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub grid: VoxelGrid,
    pub poses: Vec<Pose>,
    /// Per-frame lighting in camera frame.
    pub lights: Vec<LightState>,
    pub report: EnergyReport,
}

/// Camera-frame lights to the world-frame form used inside refinement.
pub fn lights_to_world(lights: &[LightState], poses: &[Pose]) -> Vec<LightState> {
    lights
        .iter()
        .zip(poses)
        .map(|(l, p)| match l {
            LightState::Sh(c) => LightState::Sh(c.map(|v| sh_to_world(&v, &p.rotation))),
            other => *other,
        })
        .collect()
}

pub fn lights_to_camera(lights: &[LightState], poses: &[Pose]) -> Vec<LightState> {
    lights
        .iter()
        .zip(poses)
        .map(|(l, p)| match l {
            LightState::Sh(c) => LightState::Sh(c.map(|v| sh_to_camera(&v, &p.rotation))),
            other => *other,
        })
        .collect()
}

/// Refine a fused grid against posed RGB-D frames.
///
/// Visibility is recomputed from the depth frames. Frames without a light
/// estimate (or with one of the other model) start from an ambient SH
/// vector or unit point-light intensity, followed by one lighting solve.
pub fn run(grid: VoxelGrid, frames: &[Frame], k: &Intrinsics, config: &RefineConfig) -> Result<RefineOutput> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut grid = grid;
    let fusion_params = FusionParams::default();
    fusion::compute_visibility(&mut grid, frames, k, &fusion_params);
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
    let mut need_light_solve = false;
    let camera_lights: Vec<LightState> = frames
        .iter()
        .map(|f| match (f.light, config.model) {
            (Some(l), m) if l.model() == m => l,
            (_, ShadingModel::Sh) => {
                need_light_solve = true;
                LightState::sh(Vector4::new(1.0, 0.0, 0.0, 0.0))
            }
            (_, ShadingModel::Pls) => {
                need_light_solve = true;
                LightState::Pls(1.0)
            }
        })
        .collect();
    let lights = lights_to_world(&camera_lights, &poses);
    let colors: Vec<_> = frames.iter().map(|f| f.color.clone()).collect();
    let mut r = Refinement::new(grid, &colors, *k, poses, lights, *config)?
        .with_depth(frames.iter().map(|f| &f.depth).collect(), fusion_params);
    if need_light_solve {
        r.initialize_lights();
    }
    let report = r.run()?;
    let (grid, poses, lights) = r.into_parts();
    let lights = lights_to_camera(&lights, &poses);
    Ok(RefineOutput { grid, poses, lights, report })
}
