//! Sparse gradient-SDF voxel grid.
//!
//! Every voxel stores a truncated signed distance together with the unit
//! distance gradient, which maps the voxel center onto the surface with a
//! single step `x = v - ψ g`.

mod checkpoint;

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub use checkpoint::CHECKPOINT_MAGIC;

/// Integer voxel coordinates.
pub type VoxelIndex = [i32; 3];

/// Smallest gradient magnitude (per meter) that still defines a normal.
pub const MIN_GRADIENT_NORM: f64 = 1e-6;

/// Accumulated fusion weight below which a neighbour is only used for the
/// distance gradient when the opposite neighbour is weaker still.
pub const MIN_STENCIL_WEIGHT: f64 = 0.5;

/// Bitset over frame indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameSet {
    words: Vec<u64>,
}

impl FrameSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame: usize) {
        let (w, b) = (frame / 64, frame % 64);
        if self.words.len() <= w {
            self.words.resize(w + 1, 0);
        }
        self.words[w] |= 1 << b;
    }

    pub fn remove(&mut self, frame: usize) {
        let (w, b) = (frame / 64, frame % 64);
        if let Some(word) = self.words.get_mut(w) {
            *word &= !(1 << b);
        }
    }

    pub fn contains(&self, frame: usize) -> bool {
        let (w, b) = (frame / 64, frame % 64);
        self.words.get(w).is_some_and(|word| word & (1 << b) != 0)
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn clear(&mut self) {
        self.words.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &word)| {
            (0..64).filter(move |b| word & (1 << b) != 0).map(move |b| w * 64 + b)
        })
    }
}

/// Per-voxel state.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelRecord {
    /// Truncated signed distance in meters, positive in front of the surface.
    pub psi: f64,
    /// Unit distance gradient in the world frame (zero until observed).
    pub grad: Vector3<f64>,
    pub weight: f64,
    pub albedo: Vector3<f64>,
    pub intensity_sum: Vector3<f64>,
    pub obs_count: u32,
    /// Frames in which this voxel's surface point was observed.
    pub visibility: FrameSet,
}

impl Default for VoxelRecord {
    fn default() -> Self {
        Self {
            psi: 0.0,
            grad: Vector3::zeros(),
            weight: 0.0,
            albedo: Vector3::repeat(0.5),
            intensity_sum: Vector3::zeros(),
            obs_count: 0,
            visibility: FrameSet::new(),
        }
    }
}

impl VoxelRecord {
    pub fn is_observed(&self) -> bool {
        self.weight > 0.0
    }
}

/// Neighbour values needed for the one-sided distance gradient of a voxel.
///
/// Along each axis the backward neighbour (`idx - e_a`) is used when it
/// exists, otherwise the forward one with flipped sign; `sign[a]` is the
/// derivative of gradient component `a` with respect to the voxel's own
/// distance times the voxel size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientStencil {
    pub neighbor_psi: [f64; 3],
    pub sign: [f64; 3],
    pub voxel_size: f64,
}

impl GradientStencil {
    /// Unnormalized `∇ψ` for a given own distance.
    pub fn gradient(&self, psi: f64) -> Vector3<f64> {
        Vector3::from_fn(|a, _| self.sign[a] * (psi - self.neighbor_psi[a]) / self.voxel_size)
    }

    /// `d(∇ψ)/dψ` for the voxel's own distance.
    pub fn gradient_derivative(&self) -> Vector3<f64> {
        Vector3::from_fn(|a, _| self.sign[a] / self.voxel_size)
    }

    /// Normalized gradient and its derivative with respect to own distance.
    pub fn normal_and_derivative(&self, psi: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let grad = self.gradient(psi);
        let norm = grad.norm();
        if norm <= MIN_GRADIENT_NORM {
            return Err(Error::NormalUndefined);
        }
        let n = grad / norm;
        let d = self.gradient_derivative();
        let dn = (d - n * n.dot(&d)) / norm;
        Ok((n, dn))
    }
}

/// Sparse voxel grid. Records are kept in insertion order, which makes
/// iteration deterministic for a given insertion history.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    voxel_size: f64,
    origin: Vector3<f64>,
    truncation: f64,
    keys: Vec<VoxelIndex>,
    records: Vec<VoxelRecord>,
    lookup: HashMap<VoxelIndex, usize>,
}

impl VoxelGrid {
    pub fn new(voxel_size: f64, origin: Vector3<f64>, truncation: f64) -> Self {
        assert!(voxel_size > 0.0 && truncation > 0.0);
        Self {
            voxel_size,
            origin,
            truncation,
            keys: Vec::new(),
            records: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Sample an analytic distance field `sdf(x) -> (ψ, ∇ψ)` on all voxels of
    /// the box `[lo, hi]` where `|ψ| < band`.
    pub fn from_sdf(
        voxel_size: f64,
        origin: Vector3<f64>,
        truncation: f64,
        lo: Vector3<f64>,
        hi: Vector3<f64>,
        band: f64,
        sdf: impl Fn(&Vector3<f64>) -> (f64, Vector3<f64>),
    ) -> Self {
        let mut grid = Self::new(voxel_size, origin, truncation);
        let i0 = grid.containing_index(&lo);
        let i1 = grid.containing_index(&hi);
        for x in i0[0]..=i1[0] {
            for y in i0[1]..=i1[1] {
                for z in i0[2]..=i1[2] {
                    let idx = [x, y, z];
                    let c = grid.voxel_center(&idx);
                    let (psi, g) = sdf(&c);
                    if psi.abs() < band {
                        let slot = grid.insert(idx);
                        let rec = &mut grid.records[slot];
                        rec.psi = psi.clamp(-truncation, truncation);
                        rec.grad = g.normalize();
                        rec.weight = 1.0;
                    }
                }
            }
        }
        grid
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn keys(&self) -> &[VoxelIndex] {
        &self.keys
    }

    pub fn records(&self) -> &[VoxelRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [VoxelRecord] {
        &mut self.records
    }

    /// Indices alongside mutable records, for parallel per-voxel updates.
    pub fn split_mut(&mut self) -> (&[VoxelIndex], &mut [VoxelRecord]) {
        (&self.keys, &mut self.records)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelIndex, &VoxelRecord)> {
        self.keys.iter().zip(self.records.iter())
    }

    pub fn slot(&self, idx: &VoxelIndex) -> Option<usize> {
        self.lookup.get(idx).copied()
    }

    pub fn get(&self, idx: &VoxelIndex) -> Option<&VoxelRecord> {
        self.slot(idx).map(|s| &self.records[s])
    }

    pub fn get_mut(&mut self, idx: &VoxelIndex) -> Option<&mut VoxelRecord> {
        self.slot(idx).map(move |s| &mut self.records[s])
    }

    /// Observed record at `idx`, if any.
    pub fn observed(&self, idx: &VoxelIndex) -> Option<&VoxelRecord> {
        self.get(idx).filter(|r| r.is_observed())
    }

    /// Slot of `idx`, allocating a default record if needed.
    pub fn insert(&mut self, idx: VoxelIndex) -> usize {
        if let Some(&slot) = self.lookup.get(&idx) {
            return slot;
        }
        let slot = self.records.len();
        self.keys.push(idx);
        self.records.push(VoxelRecord::default());
        self.lookup.insert(idx, slot);
        slot
    }

    pub(crate) fn push_record(&mut self, idx: VoxelIndex, rec: VoxelRecord) -> Result<()> {
        if self.lookup.contains_key(&idx) {
            return Err(Error::Checkpoint(format!("duplicate voxel index {idx:?}")));
        }
        self.lookup.insert(idx, self.records.len());
        self.keys.push(idx);
        self.records.push(rec);
        Ok(())
    }

    /// Drop all voxels failing `keep`, preserving the order of the rest.
    pub fn retain(&mut self, mut keep: impl FnMut(&VoxelIndex, &VoxelRecord) -> bool) {
        let keys = std::mem::take(&mut self.keys);
        let records = std::mem::take(&mut self.records);
        self.lookup.clear();
        for (k, r) in keys.into_iter().zip(records) {
            if keep(&k, &r) {
                self.lookup.insert(k, self.records.len());
                self.keys.push(k);
                self.records.push(r);
            }
        }
    }

    /// `origin + (idx + 0.5) v^s`.
    pub fn voxel_center(&self, idx: &VoxelIndex) -> Vector3<f64> {
        self.origin + Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * self.voxel_size
    }

    /// Index of the voxel whose cell contains `x`.
    pub fn containing_index(&self, x: &Vector3<f64>) -> VoxelIndex {
        let r = (x - self.origin) / self.voxel_size;
        [r.x.floor() as i32, r.y.floor() as i32, r.z.floor() as i32]
    }

    /// Index of the voxel center nearest to `x`; ties go to the lower index.
    pub fn nearest_index(&self, x: &Vector3<f64>) -> VoxelIndex {
        let r = (x - self.origin) / self.voxel_size - Vector3::repeat(0.5);
        [
            (r.x - 0.5).ceil() as i32,
            (r.y - 0.5).ceil() as i32,
            (r.z - 0.5).ceil() as i32,
        ]
    }

    /// Surface point `v - g ψ` of an observed voxel.
    pub fn surface_point(&self, rec: &VoxelRecord, center: &Vector3<f64>) -> Result<Vector3<f64>> {
        surface_point(rec, center, self.truncation)
    }

    /// First-order distance at `x` extrapolated from the nearest voxel, and
    /// that voxel's gradient.
    pub fn extrapolated_distance(&self, x: &Vector3<f64>) -> Result<(f64, Vector3<f64>)> {
        let idx = self.nearest_index(x);
        let rec = self.observed(&idx).ok_or(Error::OutOfVolume)?;
        let v = self.voxel_center(&idx);
        Ok((rec.psi + (x - v).dot(&rec.grad), rec.grad))
    }

    /// One-sided finite-difference stencil of the distance field at `idx`.
    pub fn gradient_stencil(&self, idx: &VoxelIndex) -> Result<GradientStencil> {
        let mut neighbor_psi = [0.0; 3];
        let mut sign = [0.0; 3];
        for axis in 0..3 {
            let mut back = *idx;
            back[axis] -= 1;
            let mut fwd = *idx;
            fwd[axis] += 1;
            let b = self.observed(&back);
            let f = self.observed(&fwd);
            // a single grazing observation is not trusted over a well observed
            // neighbour on the other side
            let reliable = |r: &&VoxelRecord| r.weight >= MIN_STENCIL_WEIGHT;
            let (rec, s) = match (b.filter(reliable), f.filter(reliable), b, f) {
                (Some(r), _, _, _) => (r, 1.0),
                (None, Some(r), _, _) => (r, -1.0),
                (None, None, Some(r), _) => (r, 1.0),
                (None, None, None, Some(r)) => (r, -1.0),
                (None, None, None, None) => return Err(Error::GradientUndefined { axis }),
            };
            neighbor_psi[axis] = rec.psi;
            sign[axis] = s;
        }
        Ok(GradientStencil {
            neighbor_psi,
            sign,
            voxel_size: self.voxel_size,
        })
    }

    /// Unnormalized finite-difference `∇ψ` (per meter).
    pub fn finite_diff_gradient(&self, idx: &VoxelIndex) -> Result<Vector3<f64>> {
        let rec = self.observed(idx).ok_or(Error::NoSurface)?;
        Ok(self.gradient_stencil(idx)?.gradient(rec.psi))
    }

    /// `∇ψ / ‖∇ψ‖`.
    pub fn normal_from_gradient(&self, idx: &VoxelIndex) -> Result<Vector3<f64>> {
        let g = self.finite_diff_gradient(idx)?;
        let n = g.norm();
        if n <= MIN_GRADIENT_NORM {
            return Err(Error::NormalUndefined);
        }
        Ok(g / n)
    }

    /// Split every observed voxel into eight children of half the size,
    /// initializing the children by a first-order Taylor step along the
    /// parent gradient.
    pub fn subdivide(&self) -> VoxelGrid {
        let half = self.voxel_size * 0.5;
        let mut fine = VoxelGrid::new(half, self.origin, self.truncation);
        let quarter = self.voxel_size * 0.25;
        for (idx, rec) in self.iter().filter(|(_, r)| r.is_observed()) {
            for corner in 0..8 {
                let o = [(corner & 1) as i32, ((corner >> 1) & 1) as i32, ((corner >> 2) & 1) as i32];
                let s = Vector3::new(
                    (2 * o[0] - 1) as f64,
                    (2 * o[1] - 1) as f64,
                    (2 * o[2] - 1) as f64,
                );
                let child_idx = [2 * idx[0] + o[0], 2 * idx[1] + o[1], 2 * idx[2] + o[2]];
                let child = VoxelRecord {
                    psi: (rec.psi + quarter * s.dot(&rec.grad)).clamp(-self.truncation, self.truncation),
                    grad: rec.grad,
                    weight: rec.weight,
                    albedo: rec.albedo,
                    intensity_sum: Vector3::zeros(),
                    obs_count: 0,
                    visibility: rec.visibility.clone(),
                };
                // children of distinct parents never collide
                let slot = fine.insert(child_idx);
                fine.records[slot] = child;
            }
        }
        fine
    }

    /// Observed voxels with `|ψ| < band`, in lexicographic index order.
    pub fn surface_voxels(&self, band: f64) -> Vec<VoxelIndex> {
        let mut out: Vec<VoxelIndex> = self
            .iter()
            .filter(|(_, r)| r.is_observed() && r.psi.abs() < band)
            .map(|(k, _)| *k)
            .collect();
        out.sort_unstable();
        out
    }
}

/// Surface point `v - g ψ` of an observed voxel with `|ψ| < truncation`.
pub fn surface_point(rec: &VoxelRecord, center: &Vector3<f64>, truncation: f64) -> Result<Vector3<f64>> {
    if !rec.is_observed() || rec.psi.abs() >= truncation {
        return Err(Error::NoSurface);
    }
    Ok(center - rec.grad * rec.psi)
}
