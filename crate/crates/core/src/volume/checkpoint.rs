//! Binary grid checkpoints.
//!
//! Layout (little-endian): magic `GSDF1`, voxel size f64, origin 3×f64,
//! truncation f64, record count u64, then per record: index 3×i32, psi f32,
//! grad 3×f32, weight f32, albedo 3×f32. Visibility bits and intensity
//! accumulators are not stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{VoxelGrid, VoxelRecord};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"GSDF1";

fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f32(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&(v as f32).to_le_bytes())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

fn read_f32(r: &mut impl Read) -> Result<f64> {
    Ok(f32::from_le_bytes(read_array(r)?) as f64)
}

fn read_i32(r: &mut impl Read) -> Result<i32> {
    Ok(i32::from_le_bytes(read_array(r)?))
}

impl VoxelGrid {
    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_f64(w, self.voxel_size)?;
        for a in 0..3 {
            write_f64(w, self.origin[a])?;
        }
        write_f64(w, self.truncation)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (idx, rec) in self.iter() {
            for i in idx {
                w.write_all(&i.to_le_bytes())?;
            }
            write_f32(w, rec.psi)?;
            for a in 0..3 {
                write_f32(w, rec.grad[a])?;
            }
            write_f32(w, rec.weight)?;
            for a in 0..3 {
                write_f32(w, rec.albedo[a])?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<VoxelGrid> {
        let magic: [u8; 5] = read_array(r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let voxel_size = read_f64(r)?;
        let origin = Vector3::new(read_f64(r)?, read_f64(r)?, read_f64(r)?);
        let truncation = read_f64(r)?;
        if !(voxel_size > 0.0 && truncation > 0.0) || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::Checkpoint("invalid header".into()));
        }
        let count = u64::from_le_bytes(read_array(r)?);
        let mut grid = VoxelGrid::new(voxel_size, origin, truncation);
        for _ in 0..count {
            let idx = [read_i32(r)?, read_i32(r)?, read_i32(r)?];
            let psi = read_f32(r)?;
            let grad = Vector3::new(read_f32(r)?, read_f32(r)?, read_f32(r)?);
            let weight = read_f32(r)?;
            let albedo = Vector3::new(read_f32(r)?, read_f32(r)?, read_f32(r)?);
            // renormalize after the f32 round trip
            let grad = if grad.norm() > 0.0 { grad.normalize() } else { grad };
            let rec = VoxelRecord {
                psi: psi.clamp(-truncation, truncation),
                grad,
                weight,
                albedo,
                ..Default::default()
            };
            grid.push_record(idx, rec)?;
        }
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<VoxelGrid> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_records_to_f32() {
        let mut g = VoxelGrid::new(0.02, Vector3::new(-1.0, 0.5, 2.0), 0.1);
        for i in 0..50 {
            let s = g.insert([i - 25, 3 * i, -i]);
            let r = &mut g.records_mut()[s];
            r.psi = 0.001 * i as f64 - 0.02;
            r.grad = Vector3::new(1.0, i as f64, 2.0).normalize();
            r.weight = i as f64 * 0.5;
            r.albedo = Vector3::new(0.1, 0.2, 0.01 * i as f64);
        }
        let mut buf = Vec::new();
        g.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"GSDF1");
        assert_eq!(buf.len(), 5 + 5 * 8 + 8 + 50 * (12 + 32));
        let back = VoxelGrid::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.keys(), g.keys());
        assert_eq!(back.voxel_size(), 0.02);
        assert_eq!(back.origin(), g.origin());
        for (a, b) in g.records().iter().zip(back.records()) {
            assert!((a.psi - b.psi).abs() < 1e-8);
            assert!((a.grad - b.grad).norm() < 1e-6);
            assert!((a.albedo - b.albedo).norm() < 1e-6);
            assert_eq!(a.weight as f32 as f64, b.weight);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            VoxelGrid::read_checkpoint(&mut &b"GSDF2aaaaaaaaaaaaaaaaaaaaaaaa"[..]),
            Err(Error::Checkpoint(_))
        ));
        let g = VoxelGrid::new(0.02, Vector3::zeros(), 0.1);
        let mut buf = Vec::new();
        g.write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(VoxelGrid::read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
