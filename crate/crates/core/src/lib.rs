//! Gradient-SDF RGB-D reconstruction with photometric-stereo refinement.

pub mod dataset_io;
pub mod error;
pub mod eval;
pub mod frame;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod shading;
pub mod synth;
pub mod refine;
pub mod tracking;
pub mod volume;

pub use error::{Error, Result};
pub use frame::Frame;
pub use geometry::{Intrinsics, Pose, Twist};
pub use image::{ColorImage, DepthImage};
pub use shading::{LightState, ShadingModel};
pub use volume::{VoxelGrid, VoxelRecord};
