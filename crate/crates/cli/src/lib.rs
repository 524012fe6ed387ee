//! Command-line pipeline driver: configuration, stages and exit codes.

pub mod config;
pub mod stages;

use voxelps::Error;

pub use config::Config;

/// Process exit codes.
pub mod exit {
    pub const GENERIC: i32 = 1;
    /// Bad flags or configuration.
    pub const USAGE: i32 = 2;
    /// Missing or malformed input data.
    pub const DATASET: i32 = 3;
    pub const TRACKING_LOST: i32 = 4;
    pub const NAN_ENERGY: i32 = 5;
}

/// Marks errors caused by the configuration or flags.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit code for an error, from the first recognized cause in its chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return exit::USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Dataset(_)
                | Error::EmptyDataset
                | Error::Checkpoint(_)
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::EmptyCloud => exit::DATASET,
                Error::TrackingLost { .. } => exit::TRACKING_LOST,
                Error::NanEnergy { .. } => exit::NAN_ENERGY,
                Error::InvalidArgument(_) => exit::USAGE,
                _ => exit::GENERIC,
            };
        }
    }
    exit::GENERIC
}

/// Run `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        b = b.num_threads(n);
    }
    Ok(b.build()?.install(f))
}
