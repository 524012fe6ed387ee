//! Trajectory and geometry error metrics.

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::dataset_io::tum::{associate, MAX_TIME_DIFFERENCE};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::volume::VoxelGrid;

/// Upper end of the normalized error axis.
pub const CDF_RANGE: f64 = 0.03;

/// Rigid transform `T` minimizing `Σ ‖T src_i − dst_i‖²` (no scale).
pub fn rigid_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Pose> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, found: src.len().min(dst.len()) });
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * v_t;
    Ok(Pose::new(r, cd - r * cs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    /// Transform applied to the estimate to align it with ground truth.
    pub alignment: Pose,
    pub pairs: usize,
}

/// Absolute trajectory error after rigid alignment of associated positions.
pub fn ate(est: &[(f64, Pose)], gt: &[(f64, Pose)]) -> Result<AteResult> {
    let te: Vec<f64> = est.iter().map(|e| e.0).collect();
    let tg: Vec<f64> = gt.iter().map(|e| e.0).collect();
    let pairs = associate(&te, &tg, MAX_TIME_DIFFERENCE);
    if pairs.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, found: pairs.len() });
    }
    let src: Vec<_> = pairs.iter().map(|&(i, _)| est[i].1.translation).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, j)| gt[j].1.translation).collect();
    let alignment = rigid_align(&src, &dst)?;
    let sq: f64 = src.iter().zip(&dst).map(|(s, d)| (alignment.apply(s) - d).norm_squared()).sum();
    Ok(AteResult {
        rmse: (sq / src.len() as f64).sqrt(),
        alignment,
        pairs: src.len(),
    })
}

pub fn ate_rmse(est: &[(f64, Pose)], gt: &[(f64, Pose)]) -> Result<f64> {
    ate(est, gt).map(|r| r.rmse)
}

/// Which distances enter the error curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CdfMode {
    /// Estimated points to their nearest ground-truth point.
    #[default]
    EstToGt,
    /// Both directions pooled.
    Symmetric,
}

/// Cumulative fraction of points within normalized error thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    /// Ground-truth bounding-box diagonal used for normalization.
    pub d_max: f64,
    /// Normalized thresholds `e` spanning `[0, 0.03]`.
    pub thresholds: Vec<f64>,
    /// Percentage of points with normalized error `≤ e`.
    pub percent: Vec<f64>,
    /// Sorted normalized errors of all points.
    errors: Vec<f64>,
}

impl ErrorCurve {
    /// Percentage of points with normalized error `≤ e`.
    pub fn percent_at(&self, e: f64) -> f64 {
        let n = self.errors.partition_point(|&x| x <= e);
        100.0 * n as f64 / self.errors.len() as f64
    }

    pub fn mean_error(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }

    pub fn max_error(&self) -> f64 {
        *self.errors.last().unwrap()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("e,percent\n");
        for (e, p) in self.thresholds.iter().zip(&self.percent) {
            s.push_str(&format!("{e:.6},{p:.6}\n"));
        }
        s
    }
}

fn tree(points: &[Vector3<f64>]) -> ImmutableKdTree<f64, u64, 3, 32> {
    let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    ImmutableKdTree::new_from_slice(&raw)
}

/// Distance from every query point to its nearest reference point.
pub fn nearest_distances(queries: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Vec<f64> {
    let t = tree(reference);
    queries
        .par_iter()
        .map(|q| t.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]).distance.sqrt())
        .collect()
}

pub fn bounding_box_diagonal(points: &[Vector3<f64>]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Cloud-to-cloud error curve normalized by the ground-truth size.
pub fn error_cdf(est: &[Vector3<f64>], gt: &[Vector3<f64>], n_bins: usize, mode: CdfMode) -> Result<ErrorCurve> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let d_max = bounding_box_diagonal(gt);
    if !(d_max > 0.0) {
        return Err(Error::InvalidArgument("ground-truth cloud has zero extent".into()));
    }
    let mut errors = nearest_distances(est, gt);
    if mode == CdfMode::Symmetric {
        errors.extend(nearest_distances(gt, est));
    }
    let mut errors: Vec<f64> = errors.into_iter().map(|d| d / d_max).collect();
    errors.sort_by(f64::total_cmp);
    let n_bins = n_bins.max(2);
    let thresholds: Vec<f64> = (0..n_bins).map(|k| CDF_RANGE * k as f64 / (n_bins - 1) as f64).collect();
    let mut curve = ErrorCurve { d_max, thresholds, percent: Vec::new(), errors };
    curve.percent = curve.thresholds.iter().map(|&e| curve.percent_at(e)).collect();
    Ok(curve)
}

/// Mean `| ‖∇ψ‖ - 1 |` over surface voxels (`|ψ| < v^s`) with a defined
/// finite-difference gradient; `None` when there are none.
pub fn gradient_norm_deviation(grid: &VoxelGrid) -> Option<f64> {
    let dev: Vec<f64> = grid
        .surface_voxels(grid.voxel_size())
        .iter()
        .filter_map(|idx| grid.finite_diff_gradient(idx).ok())
        .map(|g| (g.norm() - 1.0).abs())
        .collect();
    (!dev.is_empty()).then(|| dev.iter().sum::<f64>() / dev.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gt_trajectory(n: usize) -> Vec<(f64, Pose)> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.1;
                (i as f64 * 0.1, Pose::from_translation(Vector3::new(a.cos(), a.sin(), 0.3 * a)))
            })
            .collect()
    }

    #[test]
    fn gradient_deviation_of_plane_fields() {
        let plane = |scale: f64| {
            VoxelGrid::from_sdf(0.02, Vector3::zeros(), 0.1, Vector3::repeat(-0.2), Vector3::repeat(0.2), 0.1, |x| {
                let n = Vector3::new(1.0, 2.0, 2.0) / 3.0;
                (scale * n.dot(x), n)
            })
        };
        // exact distance: backward differences of a linear field are exact
        assert!(gradient_norm_deviation(&plane(1.0)).unwrap() < 1e-12);
        assert!((gradient_norm_deviation(&plane(1.5)).unwrap() - 0.5).abs() < 1e-12);
        assert!(gradient_norm_deviation(&VoxelGrid::new(0.02, Vector3::zeros(), 0.1)).is_none());
    }

    #[test]
    fn ate_examples() {
        let gt = gt_trajectory(50);
        assert!(ate_rmse(&gt, &gt).unwrap() < 1e-12);
        let shifted: Vec<_> = gt.iter().map(|(t, p)| (*t, Pose::from_translation(p.translation + Vector3::x()))).collect();
        assert!(ate_rmse(&shifted, &gt).unwrap() < 1e-9);
        assert!(matches!(ate_rmse(&gt[..2], &gt[..2]), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn ate_of_position_noise() {
        let gt = gt_trajectory(100);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let est: Vec<_> = gt
            .iter()
            .map(|(t, p)| {
                let n = Vector3::from_fn(|_, _| noise.sample(&mut rng));
                (*t, Pose::from_translation(p.translation + n))
            })
            .collect();
        let rmse = ate_rmse(&est, &gt).unwrap();
        let s = 0.01 * 3f64.sqrt();
        assert!(rmse > 0.8 * s && rmse < 1.1 * s, "{rmse}");
    }

    #[test]
    fn ate_is_invariant_to_rigid_motion_of_estimate() {
        let gt = gt_trajectory(40);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est: Vec<_> = gt
            .iter()
            .map(|(t, p)| (*t, Pose::from_translation(p.translation + Vector3::from_fn(|_, _| rng.random_range(-0.02..0.02)))))
            .collect();
        let g = Twist::new(Vector3::new(0.3, -1.2, 0.7), Vector3::new(2.0, -1.0, 0.5)).exp();
        let moved: Vec<_> = est.iter().map(|(t, p)| (*t, g.compose(p))).collect();
        assert!((ate_rmse(&est, &gt).unwrap() - ate_rmse(&moved, &gt).unwrap()).abs() < 1e-9);
    }

    fn cube_cloud() -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for x in 0..20 {
            for y in 0..20 {
                for z in 0..20 {
                    v.push(Vector3::new(x as f64, y as f64, z as f64) * 0.05);
                }
            }
        }
        v
    }

    #[test]
    fn cdf_examples() {
        let gt = cube_cloud();
        let c = error_cdf(&gt, &gt, 31, CdfMode::EstToGt).unwrap();
        assert!(c.percent[1..].iter().all(|&p| p == 100.0));
        let d_max = c.d_max;
        // isolated single point offset along the diagonal direction stays far from the lattice
        let far: Vec<_> = vec![Vector3::repeat(-0.01 * d_max / 3f64.sqrt())];
        let c = error_cdf(&far, &gt, 31, CdfMode::EstToGt).unwrap();
        assert_eq!(c.percent_at(0.0099), 0.0);
        assert_eq!(c.percent_at(0.0101), 100.0);
        assert!(matches!(error_cdf(&[], &gt, 10, CdfMode::EstToGt), Err(Error::EmptyCloud)));
    }

    #[test]
    fn cdf_is_monotone_and_reaches_full() {
        let gt = cube_cloud();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let est: Vec<_> = gt.iter().map(|p| p + Vector3::from_fn(|_, _| rng.random_range(-0.03..0.03))).collect();
        for mode in [CdfMode::EstToGt, CdfMode::Symmetric] {
            let c = error_cdf(&est, &gt, 50, mode).unwrap();
            assert!(c.percent.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(c.percent_at(c.max_error()), 100.0);
        }
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vector3<f64>> = (0..500).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let q: Vec<Vector3<f64>> = (0..200).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.2..1.2))).collect();
        let fast = nearest_distances(&q, &pts);
        for (qi, d) in q.iter().zip(fast) {
            let brute = pts.iter().map(|p| (p - qi).norm()).fold(f64::INFINITY, f64::min);
            assert!((brute - d).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_recovers_known_transform() {
        let g = Twist::new(Vector3::new(0.4, 0.1, -0.9), Vector3::new(1.0, 2.0, 3.0)).exp();
        let src = cube_cloud();
        let dst: Vec<_> = src.iter().map(|p| g.apply(p)).collect();
        let t = rigid_align(&src, &dst).unwrap();
        assert!((t.rotation - g.rotation).norm() < 1e-9);
        assert!((t.translation - g.translation).norm() < 1e-9);
    }
}
