//! Depth fusion into the gradient-SDF grid.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::frame::Frame;
use crate::geometry::{Intrinsics, Pose};
use crate::image::DepthImage;
use crate::volume::VoxelGrid;

/// Per-pixel unit normals in the camera frame; `None` where undefined.
#[derive(Debug, Clone)]
pub struct NormalMap {
    width: usize,
    height: usize,
    data: Vec<Option<Vector3<f64>>>,
}

impl NormalMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        self.data[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|n| n.is_some()).count()
    }
}

/// Fusion settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub mode: DistanceMode,
    /// Observations whose depth normal makes a smaller cosine with the
    /// direction toward the camera are ignored (grazing views).
    pub min_view_cos: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            mode: DistanceMode::PointToPlane,
            min_view_cos: 0.4,
        }
    }
}

/// How the per-voxel distance observation is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMode {
    /// Depth at the projected pixel minus the voxel's camera z.
    Projective,
    /// Distance to the tangent plane of the back-projected pixel.
    #[default]
    PointToPlane,
}

fn backproject_pixel(depth: &DepthImage, k: &Intrinsics, x: usize, y: usize) -> Option<Vector3<f64>> {
    let z = depth.get(x, y)?;
    k.backproject(&Vector2::new(x as f64, y as f64), z).ok()
}

/// Normals from central differences of back-projected neighbours, oriented
/// toward the camera.
pub fn depth_normals(depth: &DepthImage, k: &Intrinsics) -> NormalMap {
    let (w, h) = (depth.width(), depth.height());
    let data = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
                return None;
            }
            let p = backproject_pixel(depth, k, x, y)?;
            let dx = backproject_pixel(depth, k, x + 1, y)? - backproject_pixel(depth, k, x - 1, y)?;
            let dy = backproject_pixel(depth, k, x, y + 1)? - backproject_pixel(depth, k, x, y - 1)?;
            let n = dx.cross(&dy);
            let norm = n.norm();
            if norm < 1e-12 {
                return None;
            }
            let n = n / norm;
            Some(if n.dot(&p) > 0.0 { -n } else { n })
        })
        .collect();
    NormalMap { width: w, height: h, data }
}

/// Allocate every voxel within the truncation band along the rays through
/// the valid depth pixels.
pub fn allocate_band(grid: &mut VoxelGrid, depth: &DepthImage, k: &Intrinsics, pose: &Pose) {
    let t = grid.truncation();
    let step = grid.voxel_size() * 0.5;
    let steps = (t / step).ceil() as i32;
    let mut touched: Vec<_> = (0..depth.height())
        .into_par_iter()
        .flat_map_iter(|y| {
            let mut out = Vec::new();
            for x in 0..depth.width() {
                let Some(p) = backproject_pixel(depth, k, x, y) else {
                    continue;
                };
                let dir = p.normalize();
                for s in -steps..=steps {
                    let q = pose.apply(&(p + dir * (s as f64 * step)));
                    out.push(grid.containing_index(&q));
                }
            }
            out
        })
        .collect();
    // deterministic insertion order independent of scheduling
    touched.sort_unstable();
    touched.dedup();
    for idx in touched {
        grid.insert(idx);
    }
}

struct Observation {
    d: f64,
    /// Measured depth minus the voxel's camera z.
    behind: f64,
    normal_cam: Vector3<f64>,
    px: Vector2<f64>,
}

fn observe(
    center: &Vector3<f64>,
    pose: &Pose,
    depth: &DepthImage,
    normals: &NormalMap,
    k: &Intrinsics,
    params: &FusionParams,
) -> Option<Observation> {
    let v_cam = pose.world_to_cam(center);
    let px = k.project(&v_cam).ok()?;
    let (u, v) = (px.x.round(), px.y.round());
    if u < 0.0 || v < 0.0 || u >= depth.width() as f64 || v >= depth.height() as f64 {
        return None;
    }
    let (u, v) = (u as usize, v as usize);
    let z = depth.get(u, v)?;
    let normal_cam = normals.get(u, v)?;
    if normal_cam.dot(&-v_cam.normalize()) < params.min_view_cos {
        return None;
    }
    let behind = z - v_cam.z;
    let d = match params.mode {
        DistanceMode::Projective => behind,
        DistanceMode::PointToPlane => {
            let p = k.backproject(&Vector2::new(u as f64, v as f64), z).ok()?;
            normal_cam.dot(&(v_cam - p))
        }
    };
    Some(Observation { d, behind, normal_cam, px })
}

/// Fuse one posed frame: weighted running averages of distance and gradient,
/// intensity accumulation and visibility bits.
pub fn integrate_frame(
    grid: &mut VoxelGrid,
    frame: &Frame,
    k: &Intrinsics,
    frame_index: usize,
    params: &FusionParams,
) {
    allocate_band(grid, &frame.depth, k, &frame.pose);
    let normals = depth_normals(&frame.depth, k);
    let (vs, origin, t) = (grid.voxel_size(), grid.origin(), grid.truncation());
    let rotation = frame.pose.rotation;
    let (keys, records) = grid.split_mut();
    records.par_iter_mut().zip(keys.par_iter()).for_each(|(rec, idx)| {
        let center = origin + Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * vs;
        let Some(obs) = observe(&center, &frame.pose, &frame.depth, &normals, k, params) else {
            return;
        };
        // a voxel far behind the measured depth is occluded, even when a
        // tilted tangent plane puts it close to the surface
        if obs.d < -t || obs.behind < -t {
            return;
        }
        let d = obs.d.min(t);
        let w_obs = (1.0 + d / t).clamp(0.0, 1.0);
        if w_obs <= 0.0 {
            return;
        }
        let total = rec.weight + w_obs;
        rec.psi = ((rec.weight * rec.psi + w_obs * d) / total).clamp(-t, t);
        let g = (rec.grad * rec.weight + rotation * obs.normal_cam * w_obs) / total;
        let gn = g.norm();
        if gn > 1e-12 {
            rec.grad = g / gn;
        } else {
            rec.grad = rotation * obs.normal_cam;
        }
        rec.weight = total;
        if d.abs() < t {
            if let Ok(s) = frame.color.sample_bilinear(&obs.px) {
                rec.intensity_sum += s.value;
                rec.obs_count += 1;
                rec.visibility.insert(frame_index);
            }
        }
    });
}

/// Whether a voxel center is seen within the truncation band by a depth
/// frame, with its projection inside the sampling interior of the image.
pub(crate) fn is_visible(
    center: &Vector3<f64>,
    pose: &Pose,
    depth: &DepthImage,
    normals: &NormalMap,
    k: &Intrinsics,
    params: &FusionParams,
    truncation: f64,
) -> bool {
    let Some(obs) = observe(center, pose, depth, normals, k, params) else {
        return false;
    };
    let (w, h) = (depth.width() as f64, depth.height() as f64);
    obs.d.abs() < truncation && obs.behind >= -truncation && obs.px.x >= 1.0 && obs.px.y >= 1.0 && obs.px.x <= w - 2.0 && obs.px.y <= h - 2.0
}

/// Recompute visibility bits from scratch (checkpoints do not store them).
pub fn compute_visibility(
    grid: &mut VoxelGrid,
    frames: &[Frame],
    k: &Intrinsics,
    params: &FusionParams,
) {
    let normals: Vec<NormalMap> = frames.iter().map(|f| depth_normals(&f.depth, k)).collect();
    let (vs, origin, t) = (grid.voxel_size(), grid.origin(), grid.truncation());
    let (keys, records) = grid.split_mut();
    records.par_iter_mut().zip(keys.par_iter()).for_each(|(rec, idx)| {
        rec.visibility.clear();
        let center = origin + Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * vs;
        for (i, (frame, nm)) in frames.iter().zip(&normals).enumerate() {
            if is_visible(&center, &frame.pose, &frame.depth, nm, k, params, t) {
                rec.visibility.insert(i);
            }
        }
    });
}

/// Albedo initialized to the mean observed intensity, clamped to [0, 1].
pub fn init_albedo(grid: &mut VoxelGrid) {
    for rec in grid.records_mut() {
        if rec.obs_count > 0 {
            rec.albedo = (rec.intensity_sum / rec.obs_count as f64).map(|c| c.clamp(0.0, 1.0));
        }
    }
}

/// Fuse a whole posed sequence into a fresh grid and initialize albedo.
pub fn fuse_sequence(
    frames: &[Frame],
    k: &Intrinsics,
    voxel_size: f64,
    truncation: f64,
    params: &FusionParams,
) -> VoxelGrid {
    let mut grid = VoxelGrid::new(voxel_size, Vector3::zeros(), truncation);
    for (i, f) in frames.iter().enumerate() {
        integrate_frame(&mut grid, f, k, i, params);
    }
    init_albedo(&mut grid);
    grid
}
