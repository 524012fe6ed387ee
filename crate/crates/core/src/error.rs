use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("invalid depth {0}; depth must be positive")]
    InvalidDepth(f64),

    #[error("sample at ({0:.3}, {1:.3}) falls outside the image interior")]
    SampleOutOfImage(f64, f64),

    #[error("voxel has not been observed and carries no surface")]
    NoSurface,

    #[error("point lies outside the populated volume")]
    OutOfVolume,

    #[error("distance gradient is undefined along axis {axis}: no neighbour on either side")]
    GradientUndefined { axis: usize },

    #[error("distance gradient is degenerate; normal is undefined")]
    NormalUndefined,

    #[error("singular geometry: surface point coincides with the light source")]
    SingularGeometry,

    #[error("tracking lost: only {inliers} in-volume points")]
    TrackingLost { inliers: usize },

    #[error("dataset format error: {0}")]
    Dataset(String),

    #[error("dataset contains no usable frames")]
    EmptyDataset,

    #[error("need at least {needed} associated poses, found {found}")]
    InsufficientData { needed: usize, found: usize },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("energy became NaN during the {block} block")]
    NanEnergy { block: &'static str },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
