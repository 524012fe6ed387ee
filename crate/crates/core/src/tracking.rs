//! Depth-only frame-to-model tracking against the gradient-SDF.

use log::{debug, warn};
use nalgebra::{Matrix6, Vector2, Vector3, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::fusion::{self, FusionParams};
use crate::geometry::{skew, Intrinsics, Pose};
use crate::image::DepthImage;
use crate::volume::VoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingParams {
    /// Use every `stride`-th depth pixel along both axes.
    pub stride: usize,
    pub max_iters: usize,
    /// Stop once the update norm falls below this.
    pub min_step: f64,
    pub min_inliers: usize,
    pub initial_damping: f64,
    pub max_damping: f64,
    /// At most this many frames are tracked and fused.
    pub max_frames: usize,
    /// Huber threshold in voxel sizes, applied on top of the truncation weight.
    pub huber_scale: f64,
}

impl Default for TrackingParams {
    fn default() -> Self {
        Self {
            stride: 2,
            max_iters: 20,
            min_step: 1e-6,
            min_inliers: 100,
            initial_damping: 1e-4,
            max_damping: 1e6,
            max_frames: 300,
            huber_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    pub pose: Pose,
    pub inliers: usize,
    pub iterations: usize,
    /// Energy at the returned pose.
    pub energy: f64,
}

/// Truncated-SDF weight `clamp(1 + d/T, 0, 1)`.
pub fn point_weight(d: f64, truncation: f64) -> f64 {
    (1.0 + d / truncation).clamp(0.0, 1.0)
}

/// Back-projected depth samples in the camera frame.
pub fn depth_points(depth: &DepthImage, k: &Intrinsics, stride: usize) -> Vec<Vector3<f64>> {
    let stride = stride.max(1);
    let mut pts = Vec::new();
    for y in (0..depth.height()).step_by(stride) {
        for x in (0..depth.width()).step_by(stride) {
            if let Some(z) = depth.get(x, y) {
                if let Ok(p) = k.backproject(&Vector2::new(x as f64, y as f64), z) {
                    pts.push(p);
                }
            }
        }
    }
    pts
}

struct PointTerm {
    d: f64,
    weight: f64,
    jac: Vector6<f64>,
}

/// Distance, weight and Jacobian w.r.t. (ω, Δt) under `R ← R exp(-ω)`,
/// `t ← t - Δt`; `None` if the point falls outside the usable band.
fn point_term(grid: &VoxelGrid, pose: &Pose, x: &Vector3<f64>) -> Option<PointTerm> {
    let y = pose.apply(x);
    let idx = grid.nearest_index(&y);
    let rec = grid.observed(&idx)?;
    if rec.psi.abs() >= grid.truncation() {
        return None;
    }
    let (d, g) = grid.extrapolated_distance(&y).ok()?;
    let d_omega = (pose.rotation * skew(x)).transpose() * g;
    let mut jac = Vector6::zeros();
    jac.fixed_rows_mut::<3>(0).copy_from(&d_omega);
    jac.fixed_rows_mut::<3>(3).copy_from(&(-g));
    Some(PointTerm {
        d,
        weight: point_weight(d, grid.truncation()),
        jac,
    })
}

fn evaluate(grid: &VoxelGrid, pose: &Pose, points: &[Vector3<f64>]) -> Vec<Option<PointTerm>> {
    points.par_iter().map(|x| point_term(grid, pose, x)).collect()
}

/// Huber cost: `d²` inside `k`, linear beyond.
pub fn huber_cost(d: f64, k: f64) -> f64 {
    let a = d.abs();
    if a <= k {
        d * d
    } else {
        2.0 * k * a - k * k
    }
}

/// IRLS weight matching [`huber_cost`].
pub fn huber_weight(d: f64, k: f64) -> f64 {
    let a = d.abs();
    if a <= k {
        1.0
    } else {
        k / a
    }
}

fn energy(terms: &[Option<PointTerm>], huber: f64) -> (f64, usize) {
    let mut e = 0.0;
    let mut n = 0;
    for t in terms.iter().flatten() {
        e += t.weight * huber_cost(t.d, huber);
        n += 1;
    }
    (e, n)
}

/// Align one depth frame to the grid starting from `init`.
pub fn track_frame(
    grid: &VoxelGrid,
    depth: &DepthImage,
    k: &Intrinsics,
    init: &Pose,
    params: &TrackingParams,
) -> Result<TrackResult> {
    let points = depth_points(depth, k, params.stride);
    let huber = params.huber_scale * grid.voxel_size();
    let mut pose = *init;
    let mut terms = evaluate(grid, &pose, &points);
    let (mut e, mut inliers) = energy(&terms, huber);
    if inliers < params.min_inliers {
        return Err(Error::TrackingLost { inliers });
    }
    let mut lambda = params.initial_damping;
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let mut h = Matrix6::zeros();
        let mut b = Vector6::zeros();
        for term in terms.iter().flatten() {
            let w = term.weight * huber_weight(term.d, huber);
            h += term.jac * term.jac.transpose() * w;
            b += term.jac * (w * term.d);
        }
        let mut accepted = false;
        let mut step_norm = f64::INFINITY;
        while lambda <= params.max_damping {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(delta) = damped.cholesky().map(|c| -c.solve(&b)) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vector3::new(delta[0], delta[1], delta[2]);
            let dt = Vector3::new(delta[3], delta[4], delta[5]);
            let candidate = pose.retract(&omega, &dt);
            let cand_terms = evaluate(grid, &candidate, &points);
            let (cand_e, cand_inliers) = energy(&cand_terms, huber);
            if cand_e < e {
                pose = candidate;
                terms = cand_terms;
                e = cand_e;
                inliers = cand_inliers;
                lambda = (lambda / 10.0).max(1e-12);
                step_norm = delta.norm();
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || step_norm < params.min_step {
            break;
        }
    }
    debug!("tracked in {iterations} iterations, energy {e:.6e}, {inliers} inliers");
    if inliers < params.min_inliers {
        return Err(Error::TrackingLost { inliers });
    }
    Ok(TrackResult {
        pose: pose.orthonormalized(),
        inliers,
        iterations,
        energy: e,
    })
}

/// Poses and fused grid from sequential tracking.
#[derive(Debug, Clone)]
pub struct TrackingOutcome {
    pub grid: VoxelGrid,
    /// Indices (into the input) of the frames that were tracked and fused.
    pub tracked: Vec<usize>,
    /// Indices of frames skipped because tracking was lost.
    pub lost: Vec<usize>,
}

/// Track and fuse frames in order. The first frame with valid depth fixes the
/// world frame at its current pose (identity for fresh frames); each later
/// frame starts from the previous pose. Lost frames keep the last pose and
/// are not fused. Poses are written back into `frames`.
pub fn track_sequence(
    frames: &mut [Frame],
    k: &Intrinsics,
    voxel_size: f64,
    truncation: f64,
    params: &TrackingParams,
    fusion_params: &FusionParams,
) -> Result<TrackingOutcome> {
    let n = frames.len().min(params.max_frames);
    let mut grid = VoxelGrid::new(voxel_size, Vector3::zeros(), truncation);
    let mut tracked = Vec::new();
    let mut lost = Vec::new();
    let mut last: Option<Pose> = None;
    for i in 0..n {
        let pose = match last {
            None => {
                if frames[i].depth.valid_count() == 0 {
                    warn!("frame {i}: no valid depth, skipped");
                    lost.push(i);
                    continue;
                }
                frames[i].pose
            }
            Some(prev) => match track_frame(&grid, &frames[i].depth, k, &prev, params) {
                Ok(r) => r.pose,
                Err(Error::TrackingLost { inliers }) => {
                    warn!("frame {i}: tracking lost ({inliers} inliers), skipped");
                    frames[i].pose = prev;
                    lost.push(i);
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        frames[i].pose = pose;
        fusion::integrate_frame(&mut grid, &frames[i], k, tracked.len(), fusion_params);
        tracked.push(i);
        last = Some(pose);
    }
    if tracked.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fusion::init_albedo(&mut grid);
    Ok(TrackingOutcome { grid, tracked, lost })
}
