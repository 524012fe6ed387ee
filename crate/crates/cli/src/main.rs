use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use voxelps::dataset_io::tum;
use voxelps::VoxelGrid;
use voxelps_cli::stages::{self, GT_CLOUD};
use voxelps_cli::{exit, exit_code, with_threads, Config, UsageError};

#[derive(Parser, Debug)]
#[command(name = "voxelps", version, about = "Gradient-SDF RGB-D reconstruction with photometric refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<Model>,
    #[arg(long, global = true)]
    eval_at: Option<EvalPoint>,
    #[arg(long, global = true)]
    eikonal: Option<Switch>,
    #[arg(long, global = true)]
    refine_poses: Option<Switch>,
    #[arg(long, global = true)]
    max_frames: Option<usize>,
    #[arg(long, global = true)]
    keyframe_fraction: Option<f64>,
    /// Worker threads; 1 gives the reference ordering.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `synth.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (a file for `mesh`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Model {
    Sh,
    Pls,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalPoint {
    SurfacePoint,
    VoxelCenter,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic sequence as a TUM directory.
    Synth,
    /// Track and fuse a dataset into a grid checkpoint and trajectory.
    Track {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Refine a checkpoint against the dataset.
    Refine {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// Extract a mesh (and optionally surface points) from a checkpoint.
    Mesh {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Compare trajectories and clouds against ground truth.
    Eval {
        /// Reference cloud (PLY); defaults to the dataset's ground-truth cloud.
        #[arg(long)]
        gt_cloud: Option<PathBuf>,
        /// Clouds to compare, PLY or grid checkpoints.
        #[arg(long = "cloud")]
        clouds: Vec<PathBuf>,
        #[arg(long)]
        gt_trajectory: Option<PathBuf>,
        #[arg(long = "trajectory")]
        trajectories: Vec<PathBuf>,
    },
    /// Synthesize or load, track, refine, mesh and evaluate.
    Pipeline,
}

fn load_config(c: &Common) -> anyhow::Result<Config> {
    let usage = |e: anyhow::Error| anyhow::Error::from(UsageError(format!("{e:#}")));
    let mut cfg = match &c.config {
        Some(p) => Config::load(p).map_err(usage)?,
        None => Config::default(),
    };
    if let Some(m) = c.model {
        cfg.refine.model = match m {
            Model::Sh => "sh",
            Model::Pls => "pls",
        }
        .into();
    }
    if let Some(e) = c.eval_at {
        cfg.refine.eval_at = match e {
            EvalPoint::SurfacePoint => "surface_point",
            EvalPoint::VoxelCenter => "voxel_center",
        }
        .into();
    }
    if let Some(s) = c.eikonal {
        cfg.refine.eikonal = s.on();
    }
    if let Some(s) = c.refine_poses {
        cfg.refine.refine_poses = s.on();
    }
    if let Some(n) = c.max_frames {
        cfg.dataset.max_frames = n;
    }
    if let Some(f) = c.keyframe_fraction {
        cfg.refine.keyframe_fraction = f;
    }
    if let Some(seed) = c.seed {
        match &mut cfg.synth {
            Some(s) => s.seed = seed,
            None => return Err(UsageError("--seed needs a [synth] table in the config".into()).into()),
        }
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn dataset_dir(cfg: &Config, flag: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.dataset.path.clone())
        .ok_or_else(|| UsageError("no dataset: pass --dataset or set dataset.path".into()).into())
}

fn out_path(c: &Common) -> anyhow::Result<&Path> {
    c.out.as_deref().ok_or_else(|| UsageError("--out is required".into()).into())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = out_path(&cli.common)?;
    match &cli.command {
        Command::Synth => stages::synth(&cfg, out),
        Command::Track { dataset } => {
            let ds = stages::load_dataset(&cfg, &dataset_dir(&cfg, dataset)?)?;
            let t = stages::track(&cfg, &ds)?;
            stages::save_track(out, &t)
        }
        Command::Refine { dataset, checkpoint, trajectory } => {
            let ds = stages::load_dataset(&cfg, &dataset_dir(&cfg, dataset)?)?;
            let grid = VoxelGrid::load(checkpoint)?;
            let traj = tum::read_trajectory(trajectory)?;
            let r = stages::refine(&cfg, &ds, grid, &traj)?;
            stages::save_refine(out, &r)
        }
        Command::Mesh { checkpoint, points } => stages::mesh(&VoxelGrid::load(checkpoint)?, out, points.as_deref()),
        Command::Eval { gt_cloud, clouds, gt_trajectory, trajectories } => {
            eval(&cfg, out, gt_cloud.as_deref(), clouds, gt_trajectory.as_deref(), trajectories)
        }
        Command::Pipeline => stages::pipeline(&cfg, out).map(|_| ()),
    }
}

fn label(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn eval(
    cfg: &Config,
    out: &Path,
    gt_cloud: Option<&Path>,
    clouds: &[PathBuf],
    gt_traj: Option<&Path>,
    trajs: &[PathBuf],
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut summary = serde_json::Map::new();
    if !clouds.is_empty() {
        let gt_path = match gt_cloud {
            Some(p) => p.to_path_buf(),
            None => cfg
                .dataset
                .path
                .as_ref()
                .map(|d| d.join(GT_CLOUD))
                .ok_or_else(|| UsageError("pass --gt-cloud or set dataset.path".into()))?,
        };
        let gt = stages::load_cloud(&gt_path)?;
        let loaded = clouds
            .iter()
            .map(|p| Ok((label(p), stages::load_cloud(p)?)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let (csv, curves) = stages::compare_clouds(cfg, &loaded, &gt)?;
        std::fs::write(out.join("cdf.csv"), csv)?;
        let mut per_cloud = serde_json::Map::new();
        for ((name, pts), curve) in loaded.iter().zip(&curves) {
            let s = stages::cloud_summary(curve, pts.len(), &cfg.eval.thresholds);
            per_cloud.insert(name.clone(), serde_json::to_value(s)?);
        }
        summary.insert("clouds".into(), per_cloud.into());
    }
    if !trajs.is_empty() {
        let gt_path = gt_traj
            .map(Path::to_path_buf)
            .or_else(|| cfg.dataset.path.as_ref().map(|d| d.join("groundtruth.txt")))
            .ok_or_else(|| UsageError("pass --gt-trajectory or set dataset.path".into()))?;
        let gt = tum::read_trajectory(&gt_path)?;
        let mut per_traj = serde_json::Map::new();
        for p in trajs {
            let est = tum::read_trajectory(p)?;
            per_traj.insert(label(p), serde_json::to_value(stages::ate(&est, &gt)?)?);
        }
        summary.insert("ate_rmse_m".into(), per_traj.into());
    }
    if summary.is_empty() {
        return Err(UsageError("eval needs at least one --cloud or --trajectory".into()).into());
    }
    std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    match with_threads(cli.common.threads, || run(&cli)).and_then(|r| r) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
