//! PLY 1.0 export and import for colored point clouds and triangle meshes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::marching_cubes::Mesh;
use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// Points with optional normals and 8-bit colors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub colors: Vec<[u8; 3]>,
}

/// Geometry read back from a PLY file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyData {
    pub cloud: PointCloud,
    pub faces: Vec<[u32; 3]>,
}

pub fn color_to_u8(c: &Vector3<f64>) -> [u8; 3] {
    [0, 1, 2].map(|a| (c[a].clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Surface points `v - g ψ` and albedo of all voxels with `|ψ| < band`.
pub fn export_surface_points(grid: &VoxelGrid, band: f64) -> PointCloud {
    let mut cloud = PointCloud::default();
    let mut normals = Vec::new();
    for idx in grid.surface_voxels(band) {
        let rec = grid.get(&idx).unwrap();
        if let Ok(x) = grid.surface_point(rec, &grid.voxel_center(&idx)) {
            cloud.points.push(x);
            normals.push(rec.grad);
            cloud.colors.push(color_to_u8(&rec.albedo));
        }
    }
    cloud.normals = Some(normals);
    cloud
}

impl From<&Mesh> for PointCloud {
    fn from(m: &Mesh) -> Self {
        PointCloud {
            points: m.vertices.clone(),
            normals: Some(m.normals.clone()),
            colors: m.colors.iter().map(color_to_u8).collect(),
        }
    }
}

fn header(cloud: &PointCloud, faces: usize, binary: bool) -> String {
    let mut h = String::from("ply\n");
    h += if binary { "format binary_little_endian 1.0\n" } else { "format ascii 1.0\n" };
    h += &format!("element vertex {}\n", cloud.points.len());
    h += "property float x\nproperty float y\nproperty float z\n";
    if cloud.normals.is_some() {
        h += "property float nx\nproperty float ny\nproperty float nz\n";
    }
    h += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    if faces > 0 {
        h += &format!("element face {faces}\nproperty list uchar int vertex_indices\n");
    }
    h += "end_header\n";
    h
}

fn write_ply(w: &mut impl Write, cloud: &PointCloud, faces: &[[u32; 3]], binary: bool) -> std::io::Result<()> {
    w.write_all(header(cloud, faces.len(), binary).as_bytes())?;
    for (i, p) in cloud.points.iter().enumerate() {
        let n = cloud.normals.as_ref().map(|n| n[i]);
        let c = cloud.colors.get(i).copied().unwrap_or([255; 3]);
        if binary {
            for v in p.iter().chain(n.iter().flat_map(|n| n.iter())) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
            w.write_all(&c)?;
        } else {
            write!(w, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
            if let Some(n) = n {
                write!(w, " {} {} {}", n.x as f32, n.y as f32, n.z as f32)?;
            }
            writeln!(w, " {} {} {}", c[0], c[1], c[2])?;
        }
    }
    for f in faces {
        if binary {
            w.write_all(&[3u8])?;
            for i in f {
                w.write_all(&(*i as i32).to_le_bytes())?;
            }
        } else {
            writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
        }
    }
    Ok(())
}

pub fn save_ply(path: &Path, cloud: &PointCloud, faces: &[[u32; 3]], binary: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply(&mut w, cloud, faces, binary)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn save_mesh(path: &Path, mesh: &Mesh, binary: bool) -> Result<()> {
    save_ply(path, &PointCloud::from(mesh), &mesh.faces, binary)
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn read_binary(self, r: &mut impl Read) -> std::io::Result<f64> {
        let mut b = [0u8; 8];
        Ok(match self {
            Scalar::I8 => {
                r.read_exact(&mut b[..1])?;
                b[0] as i8 as f64
            }
            Scalar::U8 => {
                r.read_exact(&mut b[..1])?;
                b[0] as f64
            }
            Scalar::I16 => {
                r.read_exact(&mut b[..2])?;
                i16::from_le_bytes([b[0], b[1]]) as f64
            }
            Scalar::U16 => {
                r.read_exact(&mut b[..2])?;
                u16::from_le_bytes([b[0], b[1]]) as f64
            }
            Scalar::I32 => {
                r.read_exact(&mut b[..4])?;
                i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            }
            Scalar::U32 => {
                r.read_exact(&mut b[..4])?;
                u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            }
            Scalar::F32 => {
                r.read_exact(&mut b[..4])?;
                f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            }
            Scalar::F64 => {
                r.read_exact(&mut b)?;
                f64::from_le_bytes(b)
            }
        })
    }
}

enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Dataset(format!("{}: {msg}", path.display()))
}

/// Read vertices (x, y, z, optional normals and colors) and triangle faces
/// from ASCII or binary little-endian PLY.
pub fn read_ply(path: &Path) -> Result<PlyData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(bad(path, "unexpected end of header"));
        }
        Ok(line.trim().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(bad(path, "missing 'ply' magic"));
    }
    let mut binary = false;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.first().copied() {
            Some("format") => match toks.get(1).copied() {
                Some("ascii") => binary = false,
                Some("binary_little_endian") => binary = true,
                other => return Err(bad(path, format!("unsupported format {other:?}"))),
            },
            Some("element") if toks.len() == 3 => elements.push(Element {
                name: toks[1].to_string(),
                count: toks[2].parse().map_err(|_| bad(path, "bad element count"))?,
                props: Vec::new(),
            }),
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| bad(path, "property before element"))?;
                if toks.get(1) == Some(&"list") && toks.len() == 5 {
                    let c = Scalar::parse(toks[2]).ok_or_else(|| bad(path, "bad list type"))?;
                    let v = Scalar::parse(toks[3]).ok_or_else(|| bad(path, "bad list type"))?;
                    el.props.push(Property::List(c, v));
                } else if toks.len() == 3 {
                    let s = Scalar::parse(toks[1]).ok_or_else(|| bad(path, format!("bad type {}", toks[1])))?;
                    el.props.push(Property::Scalar(toks[2].to_string(), s));
                } else {
                    return Err(bad(path, format!("bad property line '{l}'")));
                }
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let mut ascii_tokens: Vec<String> = Vec::new();
    if !binary {
        let mut rest = String::new();
        r.read_to_string(&mut rest).map_err(|e| Error::io(path, e))?;
        ascii_tokens = rest.split_whitespace().map(str::to_string).collect();
    }
    let mut tok_pos = 0usize;
    let mut read_value = |r: &mut BufReader<File>, s: Scalar| -> Result<f64> {
        if binary {
            s.read_binary(r).map_err(|_| bad(path, "truncated binary body"))
        } else {
            let t = ascii_tokens.get(tok_pos).ok_or_else(|| bad(path, "truncated ascii body"))?;
            tok_pos += 1;
            let v: f64 = t.parse().map_err(|_| bad(path, format!("bad number '{t}'")))?;
            Ok(if matches!(s, Scalar::F32) { v as f32 as f64 } else { v })
        }
    };
    let mut out = PlyData::default();
    let mut normals = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut vals: Vec<(String, f64)> = Vec::new();
            let mut list: Vec<u32> = Vec::new();
            for p in &el.props {
                match p {
                    Property::Scalar(name, s) => vals.push((name.clone(), read_value(&mut r, *s)?)),
                    Property::List(c, v) => {
                        let n = read_value(&mut r, *c)? as usize;
                        for _ in 0..n {
                            list.push(read_value(&mut r, *v)? as u32);
                        }
                    }
                }
            }
            let get = |k: &str| vals.iter().find(|(n, _)| n == k).map(|(_, v)| *v);
            match el.name.as_str() {
                "vertex" => {
                    let (Some(x), Some(y), Some(z)) = (get("x"), get("y"), get("z")) else {
                        return Err(bad(path, "vertex without x/y/z"));
                    };
                    out.cloud.points.push(Vector3::new(x, y, z));
                    if let (Some(nx), Some(ny), Some(nz)) = (get("nx"), get("ny"), get("nz")) {
                        normals.push(Vector3::new(nx, ny, nz));
                    }
                    if let (Some(r), Some(g), Some(b)) = (get("red"), get("green"), get("blue")) {
                        out.cloud.colors.push([r as u8, g as u8, b as u8]);
                    }
                }
                "face" => {
                    // fan-triangulate polygons
                    for i in 1..list.len().saturating_sub(1) {
                        out.faces.push([list[0], list[i], list[i + 1]]);
                    }
                }
                _ => {}
            }
        }
    }
    if !normals.is_empty() {
        out.cloud.normals = Some(normals);
    }
    Ok(out)
}
