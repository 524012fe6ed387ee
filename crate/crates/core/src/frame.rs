use crate::geometry::Pose;
use crate::image::{ColorImage, DepthImage};
use crate::shading::LightState;

/// One RGB-D observation with its current pose and light estimate.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub color: ColorImage,
    pub depth: DepthImage,
    pub pose: Pose,
    pub light: Option<LightState>,
}

impl Frame {
    pub fn new(timestamp: f64, color: ColorImage, depth: DepthImage) -> Self {
        Self {
            timestamp,
            color,
            depth,
            pose: Pose::identity(),
            light: None,
        }
    }
}
