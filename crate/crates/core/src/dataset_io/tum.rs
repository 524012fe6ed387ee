//! TUM RGB-D directory layout: `rgb.txt`, `depth.txt`, optional
//! `groundtruth.txt` and `intrinsics.txt`, images under `rgb/` and `depth/`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::{Intrinsics, Pose};
use crate::image::{ColorImage, DepthImage};

/// Maximum timestamp offset for association, in seconds.
pub const MAX_TIME_DIFFERENCE: f64 = 0.02;

/// Timestamped camera-to-world poses.
pub type Trajectory = Vec<(f64, Pose)>;

/// Greedy association: candidate pairs closer than `max_dt` are taken in
/// order of increasing time difference, each entry used at most once.
/// Returned pairs are sorted by the first index.
pub fn associate(a: &[f64], b: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, ta) in a.iter().enumerate() {
        for (j, tb) in b.iter().enumerate() {
            let diff = (ta - tb).abs();
            if diff < max_dt {
                candidates.push((diff, ta + tb, i, j));
            }
        }
    }
    // the sum tie-break keeps the result independent of argument order
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, _, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i, l.split_whitespace().collect()))
}

fn parse_f64(tok: &str, path: &Path, line: usize) -> Result<f64> {
    tok.parse()
        .map_err(|_| Error::Dataset(format!("{}:{line}: expected a number, found '{tok}'", path.display())))
}

/// Read a `timestamp filename` list.
pub fn read_file_list(path: &Path) -> Result<Vec<(f64, String)>> {
    let text = read_text(path)?;
    data_lines(&text)
        .map(|(line, toks)| {
            if toks.len() < 2 {
                return Err(Error::Dataset(format!("{}:{line}: expected 'timestamp file'", path.display())));
            }
            Ok((parse_f64(toks[0], path, line)?, toks[1].to_string()))
        })
        .collect()
}

/// Read `timestamp tx ty tz qx qy qz qw` lines.
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = read_text(path)?;
    data_lines(&text)
        .map(|(line, toks)| {
            if toks.len() < 8 {
                return Err(Error::Dataset(format!("{}:{line}: expected 8 fields", path.display())));
            }
            let v: Vec<f64> = toks[..8].iter().map(|t| parse_f64(t, path, line)).collect::<Result<_>>()?;
            let q = UnitQuaternion::from_quaternion(Quaternion::new(v[7], v[4], v[5], v[6]));
            Ok((v[0], Pose::from_quaternion(q, Vector3::new(v[1], v[2], v[3]))))
        })
        .collect()
}

pub fn format_trajectory(traj: &[(f64, Pose)]) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, pose) in traj {
        let q = pose.quaternion();
        let p = pose.translation;
        out.push_str(&format!(
            "{t:.6} {} {} {} {} {} {} {}\n",
            p.x, p.y, p.z, q.i, q.j, q.k, q.w
        ));
    }
    out
}

pub fn write_trajectory(path: &Path, traj: &[(f64, Pose)]) -> Result<()> {
    fs::write(path, format_trajectory(traj)).map_err(|e| Error::io(path, e))
}

/// Published calibrations of the three TUM sensors.
pub fn preset_intrinsics(name: &str) -> Option<Intrinsics> {
    let (fx, fy, cx, cy) = match name {
        "fr1" | "freiburg1" => (517.3, 516.5, 318.6, 255.3),
        "fr2" | "freiburg2" => (520.9, 521.0, 325.1, 249.7),
        "fr3" | "freiburg3" => (535.4, 539.2, 320.1, 247.6),
        _ => return None,
    };
    Some(Intrinsics::new(fx, fy, cx, cy, 640, 480))
}

/// Parse `fx fy cx cy width height [depth_scale]`.
pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = read_text(path)?;
    let (line, toks) = data_lines(&text)
        .next()
        .ok_or_else(|| Error::Dataset(format!("{}: empty", path.display())))?;
    if toks.len() < 6 {
        return Err(Error::Dataset(format!("{}:{line}: expected 'fx fy cx cy width height [depth_scale]'", path.display())));
    }
    let v: Vec<f64> = toks.iter().map(|t| parse_f64(t, path, line)).collect::<Result<_>>()?;
    let mut k = Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize);
    if let Some(&s) = v.get(6) {
        k.depth_scale = s;
    }
    k.validate()?;
    Ok(k)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    let text = format!(
        "# fx fy cx cy width height depth_scale\n{} {} {} {} {} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.depth_scale
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Intrinsics for a dataset directory: explicit override, then
/// `intrinsics.txt`, then a preset matched from the directory name.
pub fn resolve_intrinsics(dir: &Path, explicit: Option<Intrinsics>) -> Result<Intrinsics> {
    if let Some(k) = explicit {
        k.validate()?;
        return Ok(k);
    }
    let file = dir.join("intrinsics.txt");
    if file.exists() {
        return read_intrinsics(&file);
    }
    let name = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().to_lowercase()))
        .unwrap_or_default();
    ["freiburg1", "freiburg2", "freiburg3", "fr1", "fr2", "fr3"]
        .iter()
        .find(|key| name.contains(*key))
        .and_then(|key| preset_intrinsics(key))
        .ok_or_else(|| Error::Dataset(format!("{}: no intrinsics.txt and no known sensor in the name", dir.display())))
}

/// A loaded sequence.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub intrinsics: Intrinsics,
    pub groundtruth: Option<Trajectory>,
}

/// Load up to `max_frames` associated RGB-D pairs.
pub fn load_tum(
    dir: &Path,
    max_frames: usize,
    intrinsics: Option<Intrinsics>,
    max_depth: f64,
) -> Result<Dataset> {
    let rgb_list = dir.join("rgb.txt");
    let depth_list = dir.join("depth.txt");
    if !rgb_list.exists() || !depth_list.exists() {
        return Err(Error::Dataset(format!("{}: rgb.txt and depth.txt are required", dir.display())));
    }
    let rgb = read_file_list(&rgb_list)?;
    let depth = read_file_list(&depth_list)?;
    let k = resolve_intrinsics(dir, intrinsics)?;
    let ta: Vec<f64> = rgb.iter().map(|e| e.0).collect();
    let tb: Vec<f64> = depth.iter().map(|e| e.0).collect();
    let pairs = associate(&ta, &tb, MAX_TIME_DIFFERENCE);
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut frames = Vec::new();
    for &(i, j) in pairs.iter().take(max_frames) {
        let color = ColorImage::load_png(&dir.join(&rgb[i].1))?;
        let depth = DepthImage::load_png(&dir.join(&depth[j].1), k.depth_scale)?.with_max_depth(max_depth);
        if color.width() != k.width || color.height() != k.height || depth.width() != k.width || depth.height() != k.height {
            return Err(Error::Dataset(format!(
                "{}: image size does not match intrinsics {}x{}",
                rgb[i].1, k.width, k.height
            )));
        }
        frames.push(Frame::new(rgb[i].0, color, depth));
    }
    let gt_path = dir.join("groundtruth.txt");
    let groundtruth = if gt_path.exists() { Some(read_trajectory(&gt_path)?) } else { None };
    Ok(Dataset { frames, intrinsics: k, groundtruth })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write frames as a TUM directory, with `groundtruth.txt` taken from the
/// frame poses when `with_groundtruth` is set.
pub fn write_tum(dir: &Path, frames: &[Frame], k: &Intrinsics, with_groundtruth: bool) -> Result<()> {
    create_dir(&dir.join("rgb"))?;
    create_dir(&dir.join("depth"))?;
    let mut rgb_txt = String::from("# color images\n# timestamp filename\n");
    let mut depth_txt = String::from("# depth maps\n# timestamp filename\n");
    for f in frames {
        let name = format!("{:.6}.png", f.timestamp);
        let rgb: PathBuf = ["rgb", &name].iter().collect();
        let depth: PathBuf = ["depth", &name].iter().collect();
        f.color.save_png(&dir.join(&rgb))?;
        f.depth.save_png(&dir.join(&depth), k.depth_scale)?;
        rgb_txt.push_str(&format!("{:.6} rgb/{name}\n", f.timestamp));
        depth_txt.push_str(&format!("{:.6} depth/{name}\n", f.timestamp));
    }
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("rgb.txt", &rgb_txt)?;
    write("depth.txt", &depth_txt)?;
    write_intrinsics(&dir.join("intrinsics.txt"), k)?;
    if with_groundtruth {
        let traj: Trajectory = frames.iter().map(|f| (f.timestamp, f.pose)).collect();
        write_trajectory(&dir.join("groundtruth.txt"), &traj)?;
    }
    Ok(())
}
