//! Marching cubes over the sparse grid. Cells span eight neighbouring voxel
//! centers; vertices are shared between cells through their edge key, so
//! closed surfaces come out watertight.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use super::mc_tables::{CORNERS, EDGE_CONNECTION, TRIANGLE_CONNECTION};
use crate::volume::{VoxelGrid, VoxelIndex, VoxelRecord};

/// Indexed triangle mesh with per-vertex normals and colors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    /// Number of edges used by exactly one face.
    pub fn boundary_edge_count(&self) -> usize {
        let mut count: HashMap<(u32, u32), usize> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().filter(|&&c| c == 1).count()
    }
}

/// Edge key: lower voxel index and axis.
type EdgeKey = (VoxelIndex, u8);

struct CellOutput {
    triangles: Vec<[EdgeKey; 3]>,
}

fn corner_index(base: &VoxelIndex, c: usize) -> VoxelIndex {
    [
        base[0] + CORNERS[c][0] as i32,
        base[1] + CORNERS[c][1] as i32,
        base[2] + CORNERS[c][2] as i32,
    ]
}

fn edge_key(base: &VoxelIndex, edge: usize) -> EdgeKey {
    let [a, b] = EDGE_CONNECTION[edge];
    let (ia, ib) = (corner_index(base, a), corner_index(base, b));
    let axis = (0..3).find(|&k| ia[k] != ib[k]).unwrap() as u8;
    (if ia < ib { ia } else { ib }, axis)
}

fn cell(grid: &VoxelGrid, base: &VoxelIndex) -> Option<CellOutput> {
    let mut cube = 0usize;
    for c in 0..8 {
        let rec = grid.observed(&corner_index(base, c))?;
        if rec.psi.abs() >= grid.truncation() {
            return None;
        }
        if rec.psi < 0.0 {
            cube |= 1 << c;
        }
    }
    let table = &TRIANGLE_CONNECTION[cube];
    let mut triangles = Vec::new();
    for t in table.chunks(3) {
        if t[0] < 0 {
            break;
        }
        // the table winds faces clockwise for inside-set corners
        triangles.push([
            edge_key(base, t[0] as usize),
            edge_key(base, t[2] as usize),
            edge_key(base, t[1] as usize),
        ]);
    }
    Some(CellOutput { triangles })
}

fn edge_vertex(grid: &VoxelGrid, key: &EdgeKey) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let a = key.0;
    let mut b = a;
    b[key.1 as usize] += 1;
    let ra: &VoxelRecord = grid.get(&a).unwrap();
    let rb: &VoxelRecord = grid.get(&b).unwrap();
    let s = ra.psi / (ra.psi - rb.psi);
    let p = grid.voxel_center(&a) * (1.0 - s) + grid.voxel_center(&b) * s;
    let n = ra.grad * (1.0 - s) + rb.grad * s;
    let n = if n.norm() > 0.0 { n.normalize() } else { n };
    (p, n, ra.albedo * (1.0 - s) + rb.albedo * s)
}

/// Extract the zero level set.
pub fn marching_cubes(grid: &VoxelGrid) -> Mesh {
    let mut bases: Vec<VoxelIndex> = grid.iter().filter(|(_, r)| r.is_observed()).map(|(k, _)| *k).collect();
    bases.sort_unstable();
    let cells: Vec<Option<CellOutput>> = bases.par_iter().map(|b| cell(grid, b)).collect();
    let mut mesh = Mesh::default();
    let mut vertex_of: HashMap<EdgeKey, u32> = HashMap::new();
    for out in cells.into_iter().flatten() {
        for tri in out.triangles {
            let mut face = [0u32; 3];
            for (slot, key) in face.iter_mut().zip(tri.iter()) {
                *slot = *vertex_of.entry(*key).or_insert_with(|| {
                    let (p, n, c) = edge_vertex(grid, key);
                    mesh.vertices.push(p);
                    mesh.normals.push(n);
                    mesh.colors.push(c);
                    (mesh.vertices.len() - 1) as u32
                });
            }
            if face[0] != face[1] && face[1] != face[2] && face[0] != face[2] {
                mesh.faces.push(face);
            }
        }
    }
    mesh
}
