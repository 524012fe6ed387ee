//! The pipeline stages. Each reads and writes plain files so that any stage
//! can be rerun on its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::{info, warn};
use nalgebra::Vector3;
use serde::Serialize;
use voxelps::dataset_io::marching_cubes::marching_cubes;
use voxelps::dataset_io::ply::{export_surface_points, read_ply, save_mesh, save_ply, PointCloud};
use voxelps::dataset_io::tum::{self, associate, Dataset, Trajectory, MAX_TIME_DIFFERENCE};
use voxelps::eval::{self, CdfMode, ErrorCurve};
use voxelps::fusion::{self, FusionParams};
use voxelps::image::{select_keyframes, sharpness};
use voxelps::refine::{self, EnergyReport};
use voxelps::synth::{self, AlbedoFn, SequenceSpec};
use voxelps::tracking::{self, TrackingParams};
use voxelps::{Error, Frame, ShadingModel, VoxelGrid};

use crate::config::{Config, SynthSection};

pub const GT_CLOUD: &str = "gt_cloud.ply";
pub const INITIAL_GRID: &str = "initial.gsdf";
pub const REFINED_GRID: &str = "refined.gsdf";
pub const TRAJECTORY: &str = "trajectory.txt";
pub const REFINED_TRAJECTORY: &str = "trajectory_refined.txt";

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Sequence description for a `[synth]` table.
pub fn sequence_spec(s: &SynthSection) -> anyhow::Result<SequenceSpec> {
    let model: ShadingModel = s.model.parse().context("synth.model")?;
    if s.frames == 0 {
        bail!("synth.frames must be at least 1");
    }
    if !(s.noise_scale >= 0.0) || !(s.resolution_scale > 0.0) {
        bail!("synth.noise_scale must be non-negative and synth.resolution_scale positive");
    }
    let noise = (s.noise_scale > 0.0).then_some((s.seed, s.noise_scale));
    let mut spec = match s.scene.as_str() {
        "desk" => SequenceSpec::desk(s.frames, model, noise),
        "sphere" => SequenceSpec::sphere(s.frames, model, noise),
        other => bail!("synth.scene: unknown scene '{other}' (expected desk or sphere)"),
    };
    spec.intrinsics = spec.intrinsics.scaled(s.resolution_scale);
    let base = Vector3::new(0.7, 0.6, 0.5);
    match (s.texture.as_deref(), s.texture_scale) {
        (None, None) => {}
        (None | Some("checkerboard"), scale) => {
            if let (AlbedoFn::Checkerboard { scale: cell, .. }, Some(v)) = (&mut spec.scene.albedo, scale) {
                *cell = v;
            }
        }
        (Some("waves"), scale) => {
            spec.scene.albedo = AlbedoFn::Waves { base, amplitude: 0.6, wavelength: scale.unwrap_or(0.04) };
        }
        (Some(other), _) => bail!("synth.texture: unknown texture '{other}' (expected checkerboard or waves)"),
    }
    Ok(spec)
}

/// Render a synthetic sequence into a TUM directory with ground truth and
/// a reference point cloud.
pub fn synth(cfg: &Config, out: &Path) -> anyhow::Result<()> {
    let Some(s) = &cfg.synth else {
        bail!("the synth stage needs a [synth] table with a seed");
    };
    let spec = sequence_spec(s)?;
    let seq = synth::generate(&spec);
    create_dir(out)?;
    tum::write_tum(out, &seq.frames, &seq.intrinsics, true)?;
    let cloud = PointCloud { points: seq.gt_cloud, normals: None, colors: Vec::new() };
    save_ply(&out.join(GT_CLOUD), &cloud, &[], true)?;
    info!("wrote {} frames to {}", seq.frames.len(), out.display());
    Ok(())
}

pub fn load_dataset(cfg: &Config, dir: &Path) -> anyhow::Result<Dataset> {
    let ds = tum::load_tum(dir, cfg.dataset.max_frames, None, cfg.dataset.max_depth)?;
    info!("loaded {} frames from {}", ds.frames.len(), dir.display());
    Ok(ds)
}

/// Assign poses from `traj` by timestamp; frames without a pose are dropped.
/// Returns the indices of the kept frames.
pub fn apply_trajectory(frames: &mut Vec<Frame>, traj: &Trajectory) -> Vec<usize> {
    let tf: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
    let tt: Vec<f64> = traj.iter().map(|e| e.0).collect();
    let mut pairs = associate(&tf, &tt, MAX_TIME_DIFFERENCE);
    pairs.sort_unstable();
    let kept: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let mut f = frames[i].clone();
        f.pose = traj[j].1;
        out.push(f);
    }
    *frames = out;
    kept
}

fn tracking_params(cfg: &Config) -> TrackingParams {
    TrackingParams {
        stride: cfg.tracking.stride,
        max_iters: cfg.tracking.max_iters,
        huber_scale: cfg.tracking.huber_scale,
        max_frames: cfg.dataset.max_frames,
        ..TrackingParams::default()
    }
}

#[derive(Debug, Clone)]
pub struct TrackOutput {
    pub grid: VoxelGrid,
    /// Poses of the fused frames.
    pub trajectory: Trajectory,
    pub lost: usize,
}

/// Fuse the dataset, either along the ground-truth trajectory or by
/// tracking. Tracking starts from the ground-truth pose of the first frame
/// when one is available.
pub fn track(cfg: &Config, ds: &Dataset) -> anyhow::Result<TrackOutput> {
    let (vs, t) = (cfg.grid.voxel_size, cfg.truncation());
    let mut frames = ds.frames.clone();
    let fusion_params = FusionParams::default();
    if cfg.tracking.use_groundtruth {
        let Some(gt) = &ds.groundtruth else {
            return Err(Error::Dataset("tracking.use_groundtruth is set but the dataset has no groundtruth.txt".into()).into());
        };
        apply_trajectory(&mut frames, gt);
        if frames.is_empty() {
            return Err(Error::Dataset("no frame has a ground-truth pose".into()).into());
        }
        let grid = fusion::fuse_sequence(&frames, &ds.intrinsics, vs, t, &fusion_params);
        let trajectory = frames.iter().map(|f| (f.timestamp, f.pose)).collect();
        return Ok(TrackOutput { grid, trajectory, lost: 0 });
    }
    if let Some(gt) = &ds.groundtruth {
        let tt: Vec<f64> = gt.iter().map(|e| e.0).collect();
        if let Some(&(_, j)) = associate(&[frames[0].timestamp], &tt, MAX_TIME_DIFFERENCE).first() {
            frames[0].pose = gt[j].1;
        }
    }
    let params = tracking_params(cfg);
    let out = tracking::track_sequence(&mut frames, &ds.intrinsics, vs, t, &params, &fusion_params)?;
    let n = out.tracked.len() + out.lost.len();
    if out.lost.len() as f64 > cfg.tracking.max_lost_fraction * n as f64 {
        return Err(Error::TrackingLost { inliers: 0 }).with_context(|| format!("{} of {n} frames lost", out.lost.len()));
    }
    if !out.lost.is_empty() {
        warn!("{} of {n} frames lost and skipped", out.lost.len());
    }
    let trajectory = out.tracked.iter().map(|&i| (frames[i].timestamp, frames[i].pose)).collect();
    Ok(TrackOutput { grid: out.grid, trajectory, lost: out.lost.len() })
}

pub fn save_track(out: &Path, t: &TrackOutput) -> anyhow::Result<()> {
    create_dir(out)?;
    t.grid.save(&out.join(INITIAL_GRID))?;
    tum::write_trajectory(&out.join(TRAJECTORY), &t.trajectory)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RefineStageOutput {
    pub grid: VoxelGrid,
    /// Refined poses of the keyframes.
    pub trajectory: Trajectory,
    pub keyframes: Vec<f64>,
    pub lights: Vec<voxelps::LightState>,
    pub report: EnergyReport,
}

/// Refine `grid` against the sharpest frames among those posed by `traj`.
pub fn refine(cfg: &Config, ds: &Dataset, grid: VoxelGrid, traj: &Trajectory) -> anyhow::Result<RefineStageOutput> {
    let rc = cfg.refine.to_config()?;
    let mut frames = ds.frames.clone();
    apply_trajectory(&mut frames, traj);
    if frames.is_empty() {
        return Err(Error::Dataset("no dataset frame matches the trajectory".into()).into());
    }
    let scores: Vec<f64> = frames.iter().map(|f| sharpness(&f.color)).collect();
    let keys = select_keyframes(&scores, cfg.refine.keyframe_fraction)?;
    let keyframes: Vec<Frame> = keys
        .iter()
        .map(|&i| {
            let mut f = frames[i].clone();
            f.light = None;
            f
        })
        .collect();
    info!("refining with {} keyframes ({} model)", keyframes.len(), rc.model.name());
    let out = refine::run(grid, &keyframes, &ds.intrinsics, &rc)?;
    let trajectory: Trajectory = keyframes.iter().zip(&out.poses).map(|(f, p)| (f.timestamp, *p)).collect();
    Ok(RefineStageOutput {
        grid: out.grid,
        keyframes: keyframes.iter().map(|f| f.timestamp).collect(),
        trajectory,
        lights: out.lights,
        report: out.report,
    })
}

pub fn save_refine(out: &Path, r: &RefineStageOutput) -> anyhow::Result<()> {
    create_dir(out)?;
    r.grid.save(&out.join(REFINED_GRID))?;
    tum::write_trajectory(&out.join(REFINED_TRAJECTORY), &r.trajectory)?;
    write(&out.join("lights.csv"), &refine::lights_csv(&r.lights))?;
    // no timing column, so reruns are byte-identical
    write(&out.join("energy.csv"), &r.report.to_csv_without_timing())?;
    Ok(())
}

/// Marching-cubes mesh and colored surface points of a grid.
pub fn mesh(grid: &VoxelGrid, mesh_path: &Path, points_path: Option<&Path>) -> anyhow::Result<()> {
    let m = marching_cubes(grid);
    save_mesh(mesh_path, &m, true)?;
    info!("mesh: {} vertices, {} faces", m.vertices.len(), m.faces.len());
    if let Some(p) = points_path {
        save_ply(p, &export_surface_points(grid, grid.voxel_size()), &[], true)?;
    }
    Ok(())
}

/// Points of a cloud given as a PLY file or a grid checkpoint.
pub fn load_cloud(path: &Path) -> anyhow::Result<Vec<Vector3<f64>>> {
    let is_grid = path.extension().is_some_and(|e| e == "gsdf");
    if is_grid {
        let g = VoxelGrid::load(path)?;
        Ok(export_surface_points(&g, g.voxel_size()).points)
    } else {
        Ok(read_ply(path)?.cloud.points)
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CloudSummary {
    pub points: usize,
    pub mean_error: f64,
    /// Percentage of points within each normalized threshold.
    pub curve_at: BTreeMap<String, f64>,
    /// Mean `| |grad psi| - 1 |` over surface voxels, for grid inputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradient_deviation: Option<f64>,
}

pub fn cloud_summary(curve: &ErrorCurve, points: usize, thresholds: &[f64]) -> CloudSummary {
    CloudSummary {
        points,
        mean_error: curve.mean_error(),
        curve_at: thresholds.iter().map(|&e| (format!("{e:.3}"), curve.percent_at(e))).collect(),
        gradient_deviation: None,
    }
}

pub fn cdf_mode(cfg: &Config) -> CdfMode {
    if cfg.eval.symmetric {
        CdfMode::Symmetric
    } else {
        CdfMode::EstToGt
    }
}

/// Error curves of several clouds against one reference, as a CSV with an
/// `e` column and one percentage column per input.
pub fn compare_clouds(
    cfg: &Config,
    clouds: &[(String, Vec<Vector3<f64>>)],
    gt: &[Vector3<f64>],
) -> anyhow::Result<(String, Vec<ErrorCurve>)> {
    let curves = clouds
        .iter()
        .map(|(name, pts)| eval::error_cdf(pts, gt, cfg.eval.n_bins, cdf_mode(cfg)).with_context(|| format!("cloud '{name}'")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut csv = String::from("e");
    for (name, _) in clouds {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    if let Some(first) = curves.first() {
        for (k, e) in first.thresholds.iter().enumerate() {
            csv.push_str(&format!("{e:.6}"));
            for c in &curves {
                csv.push_str(&format!(",{:.4}", c.percent[k]));
            }
            csv.push('\n');
        }
    }
    Ok((csv, curves))
}

/// ATE RMSE in meters, or `None` with fewer than three associated poses.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> anyhow::Result<Option<f64>> {
    match eval::ate_rmse(est, gt) {
        Ok(v) => Ok(Some(v)),
        Err(Error::InsufficientData { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EnergySummary {
    pub iterations: usize,
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    pub monotone: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PipelineSummary {
    pub frames: usize,
    pub tracked: usize,
    pub lost: usize,
    pub keyframes: usize,
    pub model: String,
    pub eval_at: String,
    pub ate_rmse_m: Option<f64>,
    pub refined_ate_rmse_m: Option<f64>,
    pub initial: Option<CloudSummary>,
    pub refined: Option<CloudSummary>,
    pub energy: EnergySummary,
}

/// Synthesize (when configured and no dataset is given), track, refine,
/// mesh and evaluate, writing everything under `out`.
pub fn pipeline(cfg: &Config, out: &Path) -> anyhow::Result<PipelineSummary> {
    create_dir(out)?;
    let dir: PathBuf = match (&cfg.dataset.path, &cfg.synth) {
        (Some(p), _) => p.clone(),
        (None, Some(_)) => {
            let d = out.join("dataset");
            synth(cfg, &d)?;
            d
        }
        (None, None) => bail!("set dataset.path or add a [synth] table"),
    };
    let ds = load_dataset(cfg, &dir)?;
    let tracked = track(cfg, &ds)?;
    save_track(out, &tracked)?;
    let refined = refine(cfg, &ds, tracked.grid.clone(), &tracked.trajectory)?;
    save_refine(out, &refined)?;
    mesh(&refined.grid, &out.join("mesh.ply"), Some(&out.join("points.ply")))?;

    let (ate_rmse_m, refined_ate_rmse_m) = match &ds.groundtruth {
        Some(gt) => (ate(&tracked.trajectory, gt)?, ate(&refined.trajectory, gt)?),
        None => (None, None),
    };
    let gt_path = dir.join(GT_CLOUD);
    let (initial, refined_cloud) = if gt_path.exists() {
        let gt = read_ply(&gt_path)?.cloud.points;
        let band = |g: &VoxelGrid| export_surface_points(g, g.voxel_size()).points;
        let clouds = vec![("initial".to_string(), band(&tracked.grid)), ("refined".to_string(), band(&refined.grid))];
        let (csv, curves) = compare_clouds(cfg, &clouds, &gt)?;
        write(&out.join("cdf.csv"), &csv)?;
        let mut a = cloud_summary(&curves[0], clouds[0].1.len(), &cfg.eval.thresholds);
        let mut b = cloud_summary(&curves[1], clouds[1].1.len(), &cfg.eval.thresholds);
        a.gradient_deviation = eval::gradient_norm_deviation(&tracked.grid);
        b.gradient_deviation = eval::gradient_norm_deviation(&refined.grid);
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    let entries = &refined.report.entries;
    let energy = EnergySummary {
        iterations: entries.len(),
        initial: entries.first().map_or(f64::NAN, |e| e.start_total),
        last: entries.last().map_or(f64::NAN, |e| e.energy.total),
        monotone: refined.report.is_monotone(),
    };
    let rc = cfg.refine.to_config()?;
    let summary = PipelineSummary {
        frames: ds.frames.len(),
        tracked: tracked.trajectory.len(),
        lost: tracked.lost,
        keyframes: refined.keyframes.len(),
        model: rc.model.name().into(),
        eval_at: cfg.refine.eval_at.clone(),
        ate_rmse_m,
        refined_ate_rmse_m,
        initial,
        refined: refined_cloud,
        energy,
    };
    write(&out.join("eval.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(summary)
}
