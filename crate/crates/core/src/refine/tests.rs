use std::time::Instant;

use nalgebra::{Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Twist;
use crate::synth::{AlbedoFn, AnalyticScene, AnalyticView, Shape};

const VS: f64 = 0.02;
const T: f64 = 0.1;

fn k() -> Intrinsics {
    Intrinsics::new(140.0, 140.0, 79.5, 59.5, 160, 120)
}

fn plane(n: Vector3<f64>, through: Vector3<f64>) -> Shape {
    let n = n.normalize();
    Shape::Plane { normal: n, offset: n.dot(&through) }
}

/// Inside of a room corner closed by a ramp: four planar facets with four
/// distinct normals, seen from the convex free space, so there is no
/// occlusion and one-sided differences of the sampled SDF are exact away
/// from the edges.
fn facets() -> (AnalyticScene, Vec<Shape>) {
    let parts = vec![
        plane(Vector3::y(), Vector3::new(0.0, -0.4, 0.0)),
        plane(-Vector3::z(), Vector3::new(0.0, 0.0, 0.6)),
        plane(Vector3::x(), Vector3::new(-0.5, 0.0, 0.0)),
        plane(Vector3::new(-1.0, 0.4, -0.4), Vector3::new(0.5, 0.0, 0.3)),
    ];
    let scene = AnalyticScene {
        shape: Shape::Union(parts.clone()),
        albedo: AlbedoFn::Waves { base: Vector3::new(0.55, 0.5, 0.45), amplitude: 0.5, wavelength: 0.3 },
    };
    (scene, parts)
}

/// Analytic grid of the facets, keeping only voxels whose stencil and
/// surface point lie on a single facet.
fn facet_grid(vs: f64) -> (AnalyticScene, VoxelGrid) {
    let (scene, parts) = facets();
    let mut grid = scene.grid(vs, T, Vector3::new(-0.7, -0.6, -0.3), Vector3::new(0.9, 0.6, 0.8));
    grid.retain(|idx, _| {
        let c = Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * vs;
        let mut d: Vec<f64> = parts.iter().map(|p| p.distance(&c)).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d[1] - d[0] > 4.0 * vs
    });
    (scene, grid)
}

fn facet_poses(n: usize) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let a = i as f64 / n.max(1) as f64 * 0.6 - 0.3;
            let eye = Vector3::new(0.35 * a.sin(), 0.05 + 0.1 * a, -0.9 + 0.1 * a.cos());
            Pose::look_at(eye, Vector3::new(0.0, -0.15, 0.4), Vector3::y())
        })
        .collect()
}

fn world_sh(i: usize) -> Vector4<f64> {
    let s = i as f64 * 0.1;
    Vector4::new(0.6, 0.2 + 0.05 * s.sin(), 0.5, -0.3 + 0.05 * s.cos())
}

fn world_lights(model: ShadingModel, n: usize) -> Vec<LightState> {
    (0..n)
        .map(|i| match model {
            ShadingModel::Sh => LightState::sh(world_sh(i)),
            ShadingModel::Pls => LightState::Pls(0.8 + 0.05 * i as f64),
        })
        .collect()
}

/// Front-facing voxels whose surface point samples the image interior.
fn set_visibility(grid: &mut VoxelGrid, poses: &[Pose]) {
    let k = k();
    let vs = grid.voxel_size();
    let origin = grid.origin();
    let (keys, records) = grid.split_mut();
    for (idx, rec) in keys.iter().zip(records.iter_mut()) {
        rec.visibility.clear();
        let c = origin + Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * vs;
        let x = c - rec.grad * rec.psi;
        for (i, p) in poses.iter().enumerate() {
            let q = p.world_to_cam(&x);
            let Ok(px) = k.project(&q) else { continue };
            let inside = px.x > 3.0 && px.y > 3.0 && px.x < 156.0 && px.y < 116.0;
            if inside && rec.grad.dot(&(p.translation - x)) > 0.0 {
                rec.visibility.insert(i);
            }
        }
    }
}

struct Setup {
    scene: AnalyticScene,
    grid: VoxelGrid,
    poses: Vec<Pose>,
    lights: Vec<LightState>,
}

impl Setup {
    fn new(model: ShadingModel, frames: usize) -> Self {
        let (scene, mut grid) = facet_grid(VS);
        let poses = facet_poses(frames);
        set_visibility(&mut grid, &poses);
        Self { scene, grid, poses, lights: world_lights(model, frames) }
    }

    fn views(&self) -> Vec<AnalyticView<'_>> {
        let cam = lights_to_camera(&self.lights, &self.poses);
        self.poses
            .iter()
            .zip(cam)
            .map(|(p, l)| AnalyticView { scene: &self.scene, intrinsics: k(), pose: *p, light: l })
            .collect()
    }
}

fn config(model: ShadingModel) -> RefineConfig {
    RefineConfig { model, upsample_at_iter: 0, ..Default::default() }
}

fn psi_error(grid: &VoxelGrid, scene: &AnalyticScene) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (idx, rec) in grid.iter() {
        if rec.psi.abs() < grid.voxel_size() {
            sum += (rec.psi - scene.shape.distance(&grid.voxel_center(idx))).abs();
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn cauchy_weight_examples() {
    assert_eq!(cauchy_weight(0.0, 0.2), 1.0);
    assert!((cauchy_weight(0.2, 0.2) - 0.5).abs() < 1e-15);
    assert_eq!(cauchy_cost(0.0, 0.2), 0.0);
}

proptest! {
    #[test]
    fn cauchy_weight_is_half_cost_derivative(r in -1.0f64..1.0, sigma in 0.05f64..1.0) {
        let h = 1e-6;
        let d = (cauchy_cost(r + h, sigma) - cauchy_cost(r - h, sigma)) / (2.0 * h);
        prop_assert!((cauchy_weight(r, sigma) * r - 0.5 * d).abs() < 1e-7);
    }
}

#[test]
fn jacobians_match_finite_differences() {
    let start = Instant::now();
    for model in [ShadingModel::Sh, ShadingModel::Pls] {
        let e = jacobians_fd_check(model, 200, 7);
        assert_eq!(e.configs, 200);
        assert!(e.albedo < 1e-10, "{model:?} {e:?}");
        assert!(e.max() < 1e-4, "{model:?} {e:?}");
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn ground_truth_energy_vanishes() {
    for model in [ShadingModel::Sh, ShadingModel::Pls] {
        let s = Setup::new(model, 4);
        let views = s.views();
        let r = Refinement::new(s.grid.clone(), &views, k(), s.poses.clone(), s.lights.clone(), config(model)).unwrap();
        assert!(r.active_voxels() > 1000);
        let e = r.energy();
        assert!(e.data < 1e-10, "{model:?} data {e:?}");
        assert!(e.eikonal < 1e-6, "{model:?} eikonal {e:?}");
    }
}

#[test]
fn zero_albedo_gives_pure_image_energy() {
    let mut s = Setup::new(ShadingModel::Sh, 2);
    for rec in s.grid.records_mut() {
        rec.albedo = Vector3::zeros();
    }
    let views = s.views();
    let cfg = config(ShadingModel::Sh);
    let r = Refinement::new(s.grid.clone(), &views, k(), s.poses.clone(), s.lights.clone(), cfg).unwrap();
    let mut expected = 0.0;
    for (idx, rec) in r.grid().iter().filter(|(_, r)| r.psi.abs() < VS) {
        let x = r.grid().voxel_center(idx) - rec.grad * rec.psi;
        for i in rec.visibility.iter() {
            let px = k().project(&s.poses[i].world_to_cam(&x)).unwrap();
            if let Ok(smp) = views[i].sample(&px) {
                expected += smp.value.iter().map(|v| cauchy_cost(*v, cfg.sigma)).sum::<f64>();
            }
        }
    }
    assert!((r.energy().data - expected).abs() < 1e-9 * expected);
}

#[test]
fn eikonal_switch_adds_exactly_its_term() {
    let s = Setup::new(ShadingModel::Sh, 2);
    let views = s.views();
    let mut grid = s.grid.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for rec in grid.records_mut() {
        rec.psi += rng.random_range(-0.002..0.002);
    }
    let on = RefineConfig { eikonal_weight: 2.5, ..config(ShadingModel::Sh) };
    let off = RefineConfig { eikonal: false, ..on };
    let a = Refinement::new(grid.clone(), &views, k(), s.poses.clone(), s.lights.clone(), on).unwrap().energy();
    let b = Refinement::new(grid, &views, k(), s.poses.clone(), s.lights.clone(), off).unwrap().energy();
    assert!(a.eikonal > 0.0);
    assert!((a.total - b.total - 2.5 * a.eikonal).abs() < 1e-9 * a.total);
    assert!((a.total - (a.data + 2.5 * a.eikonal)).abs() < 1e-9 * a.total);
}

#[test]
fn albedo_step_examples() {
    // one voxel, plane facing the camera under ambient light of 1
    let k = k();
    let mut grid = VoxelGrid::new(VS, Vector3::zeros(), T);
    let s = grid.insert([0, 0, 50]);
    grid.records_mut()[s].psi = 0.0;
    grid.records_mut()[s].weight = 1.0;
    grid.records_mut()[s].grad = -Vector3::z();
    grid.records_mut()[s].visibility.insert(0);
    grid.records_mut()[s].visibility.insert(1);
    let flat = |v: f64| ConstImage { value: Vector3::repeat(v) };
    let views = [flat(0.2), flat(0.4)];
    let poses = vec![Pose::identity(); 2];
    let lights = vec![LightState::sh(Vector4::new(1.0, 0.0, 0.0, 0.0)); 2];
    let mut r = Refinement::new(grid.clone(), &views[..1], k, poses[..1].to_vec(), lights[..1].to_vec(), config(ShadingModel::Sh)).unwrap();
    r.step_albedo();
    assert!((r.grid().records()[s].albedo - Vector3::repeat(0.2)).norm() < 1e-12);
    let mut r = Refinement::new(grid, &views, k, poses, lights, config(ShadingModel::Sh)).unwrap();
    // residuals ±0.1 around the current albedo, so the IRLS weights are equal
    r.grid.records_mut()[s].albedo = Vector3::repeat(0.3);
    r.step_albedo();
    assert!((r.grid().records()[s].albedo - Vector3::repeat(0.3)).norm() < 1e-12);
}

struct ConstImage {
    value: Vector3<f64>,
}

impl IntensitySampler for ConstImage {
    fn width(&self) -> usize {
        160
    }
    fn height(&self) -> usize {
        120
    }
    fn sample(&self, _: &nalgebra::Vector2<f64>) -> Result<crate::image::IntensitySample> {
        Ok(crate::image::IntensitySample { value: self.value, grad: nalgebra::Matrix3x2::zeros() })
    }
}

#[test]
fn albedo_and_light_recovered_on_ground_truth_geometry() {
    for model in [ShadingModel::Sh, ShadingModel::Pls] {
        let s = Setup::new(model, 4);
        let views = s.views();
        let mut grid = s.grid.clone();
        for rec in grid.records_mut() {
            rec.albedo = Vector3::repeat(0.5);
        }
        // albedo from GT lights
        let mut r = Refinement::new(grid.clone(), &views, k(), s.poses.clone(), s.lights.clone(), config(model)).unwrap();
        r.step_albedo();
        for ((_, got), (_, want)) in r.grid().iter().zip(s.grid.iter()) {
            if got.psi.abs() < VS && !got.visibility.is_empty() {
                assert!((got.albedo - want.albedo).amax() < 1e-3, "{model:?}");
            }
        }
        // lights from GT albedo
        let start = world_lights(model, 4)
            .iter()
            .map(|l| match l {
                LightState::Sh(_) => LightState::sh(Vector4::new(1.0, 0.0, 0.0, 0.0)),
                LightState::Pls(_) => LightState::Pls(3.0),
            })
            .collect();
        let mut r = Refinement::new(s.grid.clone(), &views, k(), s.poses.clone(), start, config(model)).unwrap();
        let step = r.step_light();
        assert!(step.degenerate.is_empty());
        for (got, want) in r.lights().iter().zip(&s.lights) {
            match (got, want) {
                (LightState::Sh(a), LightState::Sh(b)) => assert!((a[0] - b[0]).amax() < 1e-3),
                (LightState::Pls(a), LightState::Pls(b)) => assert!((a - b).abs() < 1e-3 * b),
                _ => unreachable!(),
            }
        }
    }
}

#[test]
fn albedo_step_solves_the_weighted_least_squares() {
    // IRLS weights at 1 (huge σ): no albedo on a scan of [0, 2] does better
    let s = Setup::new(ShadingModel::Sh, 3);
    let views = s.views();
    let mut grid = s.grid.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for rec in grid.records_mut() {
        rec.albedo = Vector3::repeat(rng.random_range(0.1..0.9));
        rec.psi += rng.random_range(-0.003..0.003);
    }
    let cfg = RefineConfig { sigma: 1e6, ..config(ShadingModel::Sh) };
    let mut r = Refinement::new(grid, &views, k(), s.poses.clone(), s.lights.clone(), cfg).unwrap();
    r.step_albedo();
    let slot = r.active[r.active.len() / 2];
    let geo = r.geometry(slot, false).unwrap();
    let rec = r.grid().records()[slot].clone();
    let cost = |a: f64| -> f64 {
        let albedo = Vector3::new(a, rec.albedo.y, rec.albedo.z);
        rec.visibility
            .iter()
            .filter_map(|i| r.eval(&geo, &albedo, i, &r.poses[i]))
            .map(|e| e.residual.x * e.residual.x)
            .sum()
    };
    let best = cost(rec.albedo.x);
    for i in 0..=20000 {
        assert!(cost(i as f64 * 1e-4) >= best - 1e-15);
    }
}

#[test]
fn degenerate_lighting_is_flagged() {
    let k = k();
    let mut grid = VoxelGrid::new(VS, Vector3::zeros(), T);
    let s = grid.insert([0, 0, 50]);
    let rec = &mut grid.records_mut()[s];
    rec.weight = 1.0;
    rec.grad = Vector3::z();
    rec.visibility.insert(0);
    let views = [ConstImage { value: Vector3::repeat(0.4) }];
    let lights = vec![LightState::sh(Vector4::new(1.0, 0.0, 0.0, 0.0))];
    let mut r = Refinement::new(grid, &views, k, vec![Pose::identity()], lights, config(ShadingModel::Sh)).unwrap();
    assert_eq!(r.step_light().degenerate, vec![0]);
}

#[test]
fn light_without_visible_voxels_is_unchanged() {
    let mut grid = VoxelGrid::new(VS, Vector3::zeros(), T);
    let s = grid.insert([0, 0, 50]);
    grid.records_mut()[s].weight = 1.0;
    let views = [ConstImage { value: Vector3::repeat(0.4) }];
    let lights = vec![LightState::Pls(1.7)];
    let mut r = Refinement::new(grid, &views, k(), vec![Pose::identity()], lights, config(ShadingModel::Pls)).unwrap();
    r.step_light();
    assert_eq!(r.lights()[0], LightState::Pls(1.7));
}

#[test]
fn ground_truth_is_a_fixed_point() {
    for model in [ShadingModel::Sh, ShadingModel::Pls] {
        let s = Setup::new(model, 4);
        let views = s.views();
        let cfg = RefineConfig { eikonal: false, refine_poses: true, ..config(model) };
        let mut r = Refinement::new(s.grid.clone(), &views, k(), s.poses.clone(), s.lights.clone(), cfg).unwrap();
        let before: Vec<f64> = r.grid().records().iter().map(|r| r.psi).collect();
        assert!(r.step_albedo() < 1e-6, "{model:?}");
        assert!(r.step_light().step < 1e-6, "{model:?}");
        r.step_distance().unwrap();
        let moved = r
            .grid()
            .records()
            .iter()
            .zip(&before)
            .map(|(a, b)| (a.psi - b).abs())
            .fold(0.0, f64::max);
        assert!(moved < 1e-6, "{model:?} moved {moved}");
        assert!(r.step_pose() < 1e-8, "{model:?}");
    }
}

#[test]
fn distance_step_reduces_perturbation() {
    for model in [ShadingModel::Sh, ShadingModel::Pls] {
        let s = Setup::new(model, 6);
        let views = s.views();
        let mut grid = s.grid.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for rec in grid.records_mut() {
            rec.psi += rng.random_range(-0.25..0.25) * VS;
        }
        let before = psi_error(&grid, &s.scene);
        let mut r = Refinement::new(grid, &views, k(), s.poses.clone(), s.lights.clone(), config(model)).unwrap();
        let e0 = r.energy().total;
        r.step_distance().unwrap();
        let after = psi_error(r.grid(), &s.scene);
        assert!(after < before, "{model:?}: {before} -> {after}");
        assert!(r.energy().total <= e0);
    }
}

#[test]
fn eikonal_sweeps_restore_unit_gradient_on_noisy_plane() {
    let sdf = |x: &Vector3<f64>| (x.z - 0.3, Vector3::z());
    let mut grid = VoxelGrid::from_sdf(VS, Vector3::zeros(), T, Vector3::new(-0.2, -0.2, 0.1), Vector3::new(0.2, 0.2, 0.5), T, sdf);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for rec in grid.records_mut() {
        rec.psi += rng.random_range(-0.1..0.1) * VS;
    }
    let views: [ConstImage; 0] = [];
    let mut r = Refinement::new(grid, &views, k(), vec![], vec![], config(ShadingModel::Sh)).unwrap();
    let mean = |r: &Refinement<ConstImage>| {
        let v: Vec<f64> = r
            .active
            .iter()
            .filter_map(|&s| r.grid().finite_diff_gradient(&r.grid().keys()[s]).ok())
            .map(|g| (g.norm() - 1.0).abs())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    for _ in 0..10 {
        r.step_distance().unwrap();
    }
    assert!(mean(&r) < 1e-2);
}

#[test]
fn perturbed_pose_is_recovered() {
    for model in [ShadingModel::Sh, ShadingModel::Pls] {
        let s = Setup::new(model, 3);
        let views = s.views();
        let mut poses = s.poses.clone();
        let twist = Twist::new(Vector3::new(0.012, -0.008, 0.006), Vector3::new(-0.009, 0.007, 0.011));
        let twist = Twist::from_vector(&(twist.to_vector() * (0.02 / twist.norm())));
        poses[1] = poses[1].compose(&twist.exp());
        let cfg = RefineConfig { refine_poses: true, ..config(model) };
        let mut r = Refinement::new(s.grid.clone(), &views, k(), poses, s.lights.clone(), cfg).unwrap();
        for _ in 0..10 {
            r.step_pose();
        }
        let got = r.poses()[1];
        let rot = got.rotation_angle_to(&s.poses[1]).to_degrees();
        let trans = (got.translation - s.poses[1].translation).norm();
        assert!(rot < 0.1 && trans < VS / 10.0, "{model:?}: {rot}° {trans} m");
    }
}

#[test]
fn pose_without_visible_voxels_is_kept() {
    let s = Setup::new(ShadingModel::Sh, 2);
    let views = s.views();
    let mut grid = s.grid.clone();
    for rec in grid.records_mut() {
        rec.visibility.remove(1);
    }
    let mut poses = s.poses.clone();
    poses[1] = poses[1].compose(&Twist::new(Vector3::new(0.01, 0.0, 0.0), Vector3::zeros()).exp());
    let cfg = RefineConfig { refine_poses: true, ..config(ShadingModel::Sh) };
    let mut r = Refinement::new(grid, &views, k(), poses.clone(), s.lights.clone(), cfg).unwrap();
    r.step_pose();
    assert_eq!(r.poses()[1], poses[1]);
}

#[test]
fn zero_iterations_leave_grid_unchanged() {
    let s = Setup::new(ShadingModel::Sh, 2);
    let views = s.views();
    let cfg = RefineConfig { max_iters: 0, ..config(ShadingModel::Sh) };
    let mut r = Refinement::new(s.grid.clone(), &views, k(), s.poses.clone(), s.lights.clone(), cfg).unwrap();
    let report = r.run().unwrap();
    assert_eq!(report.entries.len(), 1);
    assert_eq!(r.grid().keys(), s.grid.keys());
    assert!(r.grid().records() == s.grid.records());
}

#[test]
fn run_is_monotone_and_reports_consistent_totals() {
    let s = Setup::new(ShadingModel::Sh, 4);
    let views = s.views();
    let mut grid = s.grid.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for rec in grid.records_mut() {
        rec.psi += rng.random_range(-0.2..0.2) * VS;
        rec.albedo *= rng.random_range(0.8..1.2);
    }
    let cfg = RefineConfig { max_iters: 8, upsample_at_iter: 3, ..config(ShadingModel::Sh) };
    let mut r = Refinement::new(grid, &views, k(), s.poses.clone(), s.lights.clone(), cfg).unwrap();
    let report = r.run().unwrap();
    assert!(report.is_monotone(), "{}", report.to_csv());
    assert!(report.entries.iter().any(|e| e.upsampled));
    for e in &report.entries {
        assert!((e.energy.total - (e.energy.data + cfg.eikonal_weight * e.energy.eikonal)).abs() <= 1e-9 * e.energy.total);
    }
    assert!(r.grid().voxel_size() < VS);
}

#[test]
fn nan_intensity_aborts_naming_the_block() {
    let s = Setup::new(ShadingModel::Sh, 2);
    let views = [ConstImage { value: Vector3::repeat(f64::NAN) }, ConstImage { value: Vector3::repeat(0.5) }];
    let mut r = Refinement::new(s.grid.clone(), &views, k(), s.poses.clone(), s.lights.clone(), config(ShadingModel::Sh)).unwrap();
    match r.run() {
        Err(Error::NanEnergy { block }) => assert_eq!(block, "initialization"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn report_csv_has_one_row_per_iteration() {
    let report = EnergyReport {
        entries: vec![EnergyEntry::default(), EnergyEntry { iteration: 1, ..Default::default() }],
    };
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("iteration,data,eikonal,total"));
    assert!(!report.to_csv_without_timing().contains("seconds"));
}

#[test]
fn lights_csv_lists_coefficients() {
    let csv = lights_csv(&[LightState::Pls(2.0), LightState::sh(Vector4::new(1.0, 0.0, 0.0, 0.5))]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[1].split(',').count(), 3);
    assert_eq!(lines[2].split(',').count(), 6);
}

#[test]
fn world_camera_light_round_trip() {
    let pose = Pose::look_at(Vector3::new(0.3, 0.2, -1.0), Vector3::zeros(), Vector3::y());
    let l = vec![LightState::sh(Vector4::new(0.5, 0.1, -0.2, 0.3))];
    let back = lights_to_camera(&lights_to_world(&l, &[pose]), &[pose]);
    match (back[0], l[0]) {
        (LightState::Sh(a), LightState::Sh(b)) => assert!((a[0] - b[0]).amax() < 1e-12),
        _ => unreachable!(),
    }
}
