//! Color and depth images, sub-pixel sampling, and keyframe selection.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Matrix3x2, Vector2, Vector3};

use crate::error::{Error, Result};

/// Default cut-off beyond which depth readings are treated as invalid.
pub const DEFAULT_MAX_DEPTH: f64 = 5.0;

/// Three-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

/// Single-channel depth in meters; `0` marks an invalid reading.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Interpolated intensity and its spatial derivative.
///
/// `grad` holds one row per channel and the columns `(∂/∂x, ∂/∂y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensitySample {
    pub value: Vector3<f64>,
    pub grad: Matrix3x2<f64>,
}

/// Anything the photometric residual can read intensities from.
///
/// The refinement code is generic over this so that tests can substitute a
/// smooth analytic image for the bilinear raster.
pub trait IntensitySampler: Sync {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn sample(&self, px: &Vector2<f64>) -> Result<IntensitySample>;
}

impl<T: IntensitySampler + ?Sized> IntensitySampler for &T {
    fn width(&self) -> usize {
        (**self).width()
    }
    fn height(&self) -> usize {
        (**self).height()
    }
    fn sample(&self, px: &Vector2<f64>) -> Result<IntensitySample> {
        (**self).sample(px)
    }
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    /// Build an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let c = f(x, y);
                data.push(c.map(|v| clamp_unit(v) as f32));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "color buffer has {} pixels, expected {}",
                data.len(),
                width * height
            )));
        }
        let data = data
            .into_iter()
            .map(|c| c.map(|v| clamp_unit(v as f64) as f32))
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: [f64; 3]) {
        self.data[y * self.width + x] = value.map(|v| clamp_unit(v) as f32);
    }

    fn pixel_f64(&self, x: usize, y: usize) -> Vector3<f64> {
        let p = self.get(x, y);
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    /// Round every intensity to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|c| c.map(|v| ((v * 255.0).round() / 255.0).clamp(0.0, 1.0)))
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Mean of the three channels.
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|c| (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0)
            .collect()
    }

    /// Multiply every intensity by `s`; used for exposure-gauge tests.
    pub fn scaled(&self, s: f64) -> Self {
        let data = self
            .data
            .iter()
            .map(|c| c.map(|v| clamp_unit(v as f64 * s) as f32))
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Bilinear sample with the exact derivative of the interpolant.
    ///
    /// Valid for `1 ≤ x ≤ w-2`, `1 ≤ y ≤ h-2`.
    pub fn sample_bilinear(&self, px: &Vector2<f64>) -> Result<IntensitySample> {
        let (x, y) = (px.x, px.y);
        if !(x >= 1.0 && y >= 1.0 && x <= (self.width as f64 - 2.0) && y <= (self.height as f64 - 2.0))
        {
            return Err(Error::SampleOutOfImage(x, y));
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let ax = x - x0 as f64;
        let ay = y - y0 as f64;
        let i00 = self.pixel_f64(x0, y0);
        let i10 = self.pixel_f64(x0 + 1, y0);
        let i01 = self.pixel_f64(x0, y0 + 1);
        let i11 = self.pixel_f64(x0 + 1, y0 + 1);
        let top = i00 * (1.0 - ax) + i10 * ax;
        let bottom = i01 * (1.0 - ax) + i11 * ax;
        let value = top * (1.0 - ay) + bottom * ay;
        let dx = (i10 - i00) * (1.0 - ay) + (i11 - i01) * ay;
        let dy = bottom - top;
        Ok(IntensitySample {
            value,
            grad: Matrix3x2::from_columns(&[dx, dy]),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| p.0.map(|v| v as f32 / 255.0))
            .collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(
            self.width as u32,
            self.height as u32,
            |x, y| Rgb(self.get(x as usize, y as usize).map(|v| (v * 255.0).round() as u8)),
        );
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl IntensitySampler for ColorImage {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn sample(&self, px: &Vector2<f64>) -> Result<IntensitySample> {
        self.sample_bilinear(px)
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(sanitize_depth(f(x, y)) as f32);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    /// Depth in meters, or `None` for invalid pixels.
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.data[y * self.width + x];
        (d > 0.0).then_some(d as f64)
    }

    pub fn set(&mut self, x: usize, y: usize, z: f64) {
        self.data[y * self.width + x] = sanitize_depth(z) as f32;
    }

    /// Invalidate readings beyond `max_depth`.
    pub fn with_max_depth(mut self, max_depth: f64) -> Self {
        for d in &mut self.data {
            if *d as f64 > max_depth {
                *d = 0.0;
            }
        }
        self
    }

    /// Round depths to the raw sensor resolution `1 / depth_scale`.
    pub fn quantized(&self, depth_scale: f64) -> Self {
        let data = self
            .data
            .iter()
            .map(|&d| {
                let raw = (d as f64 * depth_scale).round().min(u16::MAX as f64);
                (raw / depth_scale) as f32
            })
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn load_png(path: &Path, depth_scale: f64) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma16();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| (p.0[0] as f64 / depth_scale) as f32)
            .collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    pub fn save_png(&self, path: &Path, depth_scale: f64) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let d = self.data[y as usize * self.width + x as usize] as f64;
                Luma([(d * depth_scale).round().clamp(0.0, u16::MAX as f64) as u16])
            });
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn sanitize_depth(z: f64) -> f64 {
    if z.is_finite() && z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Variance of the 3×3 Laplacian of the gray image.
pub fn sharpness(img: &ColorImage) -> f64 {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return 0.0;
    }
    let gray = img.gray();
    let at = |x: usize, y: usize| gray[y * w + x];
    let mut n = 0.0;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
            n += 1.0;
            let delta = lap - mean;
            mean += delta / n;
            m2 += delta * (lap - mean);
        }
    }
    (m2 / n).max(0.0)
}

/// Pick the sharpest frame in each of `⌈n·fraction⌉` equal time windows.
///
/// Ties go to the earliest frame. The result is strictly increasing.
pub fn select_keyframes(scores: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keyframe fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = scores.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let windows = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let mut selected = Vec::with_capacity(windows);
    for k in 0..windows {
        let start = k * n / windows;
        let end = (k + 1) * n / windows;
        let best = (start..end)
            .reduce(|best, i| if scores[i] > scores[best] { i } else { best })
            .expect("windows are non-empty when windows <= n");
        selected.push(best);
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_blur(img: &ColorImage, sigma: f64) -> ColorImage {
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let (w, h) = (img.width() as isize, img.height() as isize);
        let pass = |src: &ColorImage, horizontal: bool| {
            ColorImage::from_fn(src.width(), src.height(), |x, y| {
                let mut acc = [0.0; 3];
                for (k, wgt) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, w - 1), y as isize)
                    } else {
                        (x as isize, (y as isize + o).clamp(0, h - 1))
                    };
                    let p = src.get(sx as usize, sy as usize);
                    for c in 0..3 {
                        acc[c] += wgt * p[c] as f64 / norm;
                    }
                }
                acc
            })
        };
        pass(&pass(img, true), false)
    }

    fn noise_image(w: usize, h: usize, seed: u64) -> ColorImage {
        let mut s = seed;
        ColorImage::from_fn(w, h, |_, _| {
            let mut next = || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            [next(), next(), next()]
        })
    }

    #[test]
    fn constant_image_samples_constant_value_and_zero_gradient() {
        let img = ColorImage::from_fn(20, 10, |_, _| [0.25, 0.5, 0.75]);
        let s = img.sample_bilinear(&Vector2::new(7.3, 4.6)).unwrap();
        assert!((s.value - Vector3::new(0.25, 0.5, 0.75)).norm() < 1e-7);
        assert_eq!(s.grad, Matrix3x2::zeros());
    }

    #[test]
    fn linear_ramp_has_constant_gradient() {
        let w = 33;
        let img = ColorImage::from_fn(w, 9, |x, _| {
            let v = x as f64 / (w - 1) as f64;
            [v, v, v]
        });
        for &x in &[1.0, 4.2, 16.5, 30.99] {
            let s = img.sample_bilinear(&Vector2::new(x, 3.3)).unwrap();
            for c in 0..3 {
                assert!((s.grad[(c, 0)] - 1.0 / (w - 1) as f64).abs() < 1e-7);
                assert!(s.grad[(c, 1)].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let img = noise_image(24, 18, 3);
        let h = 1e-6;
        let mut s = 11u64;
        for _ in 0..300 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            let fx = 1.0 + ((s >> 20) % 10_000) as f64 / 10_000.0 * 20.5;
            let fy = 1.0 + ((s >> 40) % 10_000) as f64 / 10_000.0 * 14.5;
            // stay off cell boundaries where the derivative jumps
            if (fx.fract() - 0.5).abs() > 0.49 || (fy.fract() - 0.5).abs() > 0.49 {
                continue;
            }
            let p = Vector2::new(fx, fy);
            let g = img.sample_bilinear(&p).unwrap().grad;
            let dx = (img.sample_bilinear(&(p + Vector2::new(h, 0.0))).unwrap().value
                - img.sample_bilinear(&(p - Vector2::new(h, 0.0))).unwrap().value)
                / (2.0 * h);
            let dy = (img.sample_bilinear(&(p + Vector2::new(0.0, h))).unwrap().value
                - img.sample_bilinear(&(p - Vector2::new(0.0, h))).unwrap().value)
                / (2.0 * h);
            assert!((dx - g.column(0)).norm() < 1e-6);
            assert!((dy - g.column(1)).norm() < 1e-6);
        }
    }

    #[test]
    fn integer_coordinates_return_stored_pixels() {
        let img = noise_image(12, 9, 5);
        for y in 1..8 {
            for x in 1..11 {
                let s = img.sample_bilinear(&Vector2::new(x as f64, y as f64)).unwrap();
                let p = img.get(x, y);
                for c in 0..3 {
                    assert_eq!(s.value[c], p[c] as f64);
                }
            }
        }
    }

    #[test]
    fn border_samples_are_rejected() {
        let img = ColorImage::new(10, 10);
        for p in [(0.5, 5.0), (5.0, 0.99), (8.01, 5.0), (5.0, 8.5), (-1.0, 3.0)] {
            assert!(matches!(
                img.sample_bilinear(&Vector2::new(p.0, p.1)),
                Err(Error::SampleOutOfImage(..))
            ));
        }
        assert!(img.sample_bilinear(&Vector2::new(8.0, 8.0)).is_ok());
    }

    #[test]
    fn sharpness_examples() {
        let flat = ColorImage::from_fn(32, 32, |_, _| [0.4, 0.4, 0.4]);
        assert_eq!(sharpness(&flat), 0.0);
        let checker = ColorImage::from_fn(32, 32, |x, y| {
            let v = if (x / 4 + y / 4) % 2 == 0 { 1.0 } else { 0.0 };
            [v, v, v]
        });
        assert!(sharpness(&checker) > sharpness(&flat));
        let sharp = noise_image(48, 40, 9);
        let blurred = gaussian_blur(&sharp, 2.0);
        assert!(sharpness(&blurred) < sharpness(&sharp));
    }

    #[test]
    fn keyframe_examples() {
        assert_eq!(select_keyframes(&[1.0; 10], 0.2).unwrap(), vec![0, 5]);
        assert_eq!(select_keyframes(&[3.0, 1.0, 2.0], 1.0).unwrap(), vec![0, 1, 2]);
        assert!(select_keyframes(&[], 0.5).unwrap().is_empty());
        assert!(select_keyframes(&[1.0], 0.0).is_err());
        assert!(select_keyframes(&[1.0], 1.5).is_err());
    }

    #[test]
    fn keyframes_occupy_one_slot_per_window() {
        let scores: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64).collect();
        let picked = select_keyframes(&scores, 0.1).unwrap();
        assert_eq!(picked.len(), 30);
        for (k, &i) in picked.iter().enumerate() {
            assert_eq!(i / 10, k, "frame {i} is not in window {k}");
            let window = &scores[k * 10..k * 10 + 10];
            let best = window.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(scores[i], best);
        }
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = noise_image(7, 5, 1).quantized();
        let path = dir.path().join("c.png");
        img.save_png(&path).unwrap();
        assert_eq!(ColorImage::load_png(&path).unwrap(), img);

        let depth = DepthImage::from_fn(7, 5, |x, y| if x == y { 0.0 } else { 0.5 + 0.1 * x as f64 })
            .quantized(5000.0);
        let path = dir.path().join("d.png");
        depth.save_png(&path, 5000.0).unwrap();
        assert_eq!(DepthImage::load_png(&path, 5000.0).unwrap(), depth);
    }
}
