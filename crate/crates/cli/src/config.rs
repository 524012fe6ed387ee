//! Run configuration: a TOML file with one table per stage, overridable
//! from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use voxelps::refine::{EvalAt, RefineConfig};
use voxelps::ShadingModel;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetSection,
    pub grid: GridSection,
    pub tracking: TrackingSection,
    pub refine: RefineSection,
    pub synth: Option<SynthSection>,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// TUM-layout directory. Relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    pub max_frames: usize,
    pub max_depth: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { path: None, max_frames: 300, max_depth: voxelps::image::DEFAULT_MAX_DEPTH }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub voxel_size: f64,
    /// Truncation in voxel sizes.
    pub truncation_voxels: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { voxel_size: 0.02, truncation_voxels: 5.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingSection {
    pub stride: usize,
    pub max_iters: usize,
    pub huber_scale: f64,
    /// Fuse with the ground-truth trajectory instead of tracking.
    pub use_groundtruth: bool,
    /// Fail when more than this fraction of frames is lost.
    pub max_lost_fraction: f64,
}

impl Default for TrackingSection {
    fn default() -> Self {
        let p = voxelps::tracking::TrackingParams::default();
        Self {
            stride: p.stride,
            max_iters: p.max_iters,
            huber_scale: p.huber_scale,
            use_groundtruth: false,
            max_lost_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub model: String,
    pub sigma: f64,
    pub gn_damping: f64,
    pub eikonal_weight: f64,
    pub convergence_tol: f64,
    pub max_iters: usize,
    pub upsample_at_iter: usize,
    pub eval_at: String,
    pub eikonal: bool,
    pub refine_poses: bool,
    pub per_channel_light: bool,
    /// Fraction of the sharpest frames used in the energy.
    pub keyframe_fraction: f64,
}

impl Default for RefineSection {
    fn default() -> Self {
        let c = RefineConfig::default();
        Self {
            model: c.model.name().into(),
            sigma: c.sigma,
            gn_damping: c.gn_damping,
            eikonal_weight: c.eikonal_weight,
            convergence_tol: c.convergence_tol,
            max_iters: c.max_iters,
            upsample_at_iter: c.upsample_at_iter,
            eval_at: "surface_point".into(),
            eikonal: c.eikonal,
            refine_poses: c.refine_poses,
            per_channel_light: c.per_channel_light,
            keyframe_fraction: 0.1,
        }
    }
}

impl RefineSection {
    pub fn to_config(&self) -> anyhow::Result<RefineConfig> {
        let model: ShadingModel = self.model.parse().context("refine.model")?;
        let eval_at: EvalAt = self.eval_at.parse().context("refine.eval_at")?;
        let c = RefineConfig {
            model,
            sigma: self.sigma,
            gn_damping: self.gn_damping,
            eikonal_weight: self.eikonal_weight,
            convergence_tol: self.convergence_tol,
            max_iters: self.max_iters,
            upsample_at_iter: self.upsample_at_iter,
            eval_at,
            eikonal: self.eikonal,
            refine_poses: self.refine_poses,
            per_channel_light: self.per_channel_light,
        };
        c.validate().context("[refine]")?;
        if !(self.keyframe_fraction > 0.0 && self.keyframe_fraction <= 1.0) {
            bail!("refine.keyframe_fraction must be in (0, 1], got {}", self.keyframe_fraction);
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    /// Required so that every synthetic run is reproducible.
    pub seed: u64,
    #[serde(default = "default_scene")]
    pub scene: String,
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Lighting used to render: `sh` or `pls`.
    #[serde(default = "default_model")]
    pub model: String,
    /// Multiplier on the Kinect depth noise; 0 renders noise-free depth.
    #[serde(default)]
    pub noise_scale: f64,
    /// Image size relative to 160x120.
    #[serde(default = "one")]
    pub resolution_scale: f64,
    /// `checkerboard` or `waves`.
    #[serde(default)]
    pub texture: Option<String>,
    /// Checker cell size or wave length in meters.
    #[serde(default)]
    pub texture_scale: Option<f64>,
}

fn default_scene() -> String {
    "desk".into()
}

fn default_frames() -> usize {
    20
}

fn default_model() -> String {
    "sh".into()
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_bins: usize,
    /// Thresholds reported in the summary JSON.
    pub thresholds: Vec<f64>,
    /// Symmetric cloud distances instead of estimate-to-reference.
    pub symmetric: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_bins: 300, thresholds: vec![0.005, 0.01, 0.015, 0.02], symmetric: false }
    }
}

impl Config {
    /// Parse a config file; relative dataset paths are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Config> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Config::parse(&text).with_context(|| format!("in {}", path.display()))?;
        if let Some(p) = &cfg.dataset.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> anyhow::Result<Config> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.grid.voxel_size > 0.0 && self.grid.truncation_voxels >= 1.0) {
            bail!("grid.voxel_size must be positive and grid.truncation_voxels at least 1");
        }
        if self.tracking.stride == 0 {
            bail!("tracking.stride must be at least 1");
        }
        if self.eval.n_bins == 0 {
            bail!("eval.n_bins must be at least 1");
        }
        self.refine.to_config()?;
        Ok(())
    }

    pub fn truncation(&self) -> f64 {
        self.grid.voxel_size * self.grid.truncation_voxels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = Config::parse("").unwrap();
        let r = c.refine.to_config().unwrap();
        assert_eq!(r, RefineConfig::default());
        assert_eq!(c.refine.keyframe_fraction, 0.1);
        assert_eq!(c.grid.voxel_size, 0.02);
        assert!(c.synth.is_none());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse("[refine]\nsigmaa = 0.3\n").unwrap_err();
        assert!(format!("{err:#}").contains("sigmaa"), "{err:#}");
    }

    #[test]
    fn synth_requires_seed() {
        let err = Config::parse("[synth]\nframes = 4\n").unwrap_err();
        assert!(format!("{err:#}").contains("seed"), "{err:#}");
        let c = Config::parse("[synth]\nseed = 3\n").unwrap();
        let s = c.synth.unwrap();
        assert_eq!((s.seed, s.frames, s.noise_scale), (3, 20, 0.0));
    }

    #[test]
    fn bad_model_is_rejected() {
        let err = Config::parse("[refine]\nmodel = \"phong\"\n").unwrap_err();
        assert!(format!("{err:#}").contains("phong"), "{err:#}");
    }
}
