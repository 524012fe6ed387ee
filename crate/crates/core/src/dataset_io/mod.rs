//! Dataset loading and geometry export.

pub mod marching_cubes;
#[rustfmt::skip]
mod mc_tables;
pub mod ply;
pub mod tum;

pub use marching_cubes::{marching_cubes, Mesh};
pub use ply::{export_surface_points, read_ply, save_mesh, save_ply, PointCloud};
pub use tum::{associate, load_tum, write_tum, Dataset, Trajectory};
