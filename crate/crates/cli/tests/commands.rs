use std::path::Path;
use std::process::{Command, Output};

fn voxelps(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxelps"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&voxelps(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&voxelps(&["synth"], dir.path())), 2, "missing --out");
    std::fs::write(dir.path().join("bad.toml"), "[grid]\nvoxel_size = -1.0\n").unwrap();
    assert_eq!(code(&voxelps(&["pipeline", "--config", "bad.toml", "--out", "o"], dir.path())), 2);
    std::fs::write(dir.path().join("typo.toml"), "[grid]\nvoxel_sise = 0.02\n").unwrap();
    assert_eq!(code(&voxelps(&["pipeline", "--config", "typo.toml", "--out", "o"], dir.path())), 2);
}

#[test]
fn missing_dataset_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let o = voxelps(&["track", "--dataset", "empty", "--out", "o"], dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("run.toml"),
        "[synth]\nseed = 2\nframes = 6\n[tracking]\nuse_groundtruth = true\n[refine]\nmax_iters = 2\nupsample_at_iter = 10\nkeyframe_fraction = 0.5\n",
    )
    .unwrap();
    let steps: [&[&str]; 5] = [
        &["synth", "--config", "run.toml", "--out", "ds"],
        &["track", "--config", "run.toml", "--dataset", "ds", "--out", "tr"],
        &["refine", "--config", "run.toml", "--dataset", "ds", "--checkpoint", "tr/initial.gsdf", "--trajectory", "tr/trajectory.txt", "--out", "rf"],
        &["mesh", "--checkpoint", "rf/refined.gsdf", "--points", "pts.ply", "--out", "mesh.ply"],
        &["eval", "--gt-cloud", "ds/gt_cloud.ply", "--cloud", "tr/initial.gsdf", "--cloud", "pts.ply", "--gt-trajectory", "ds/groundtruth.txt", "--trajectory", "tr/trajectory.txt", "--out", "ev"],
    ];
    for args in steps {
        let o = voxelps(args, p);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("ev/eval.json")).unwrap()).unwrap();
    assert!(summary["clouds"]["initial"].is_object());
    assert!(summary["clouds"]["pts"].is_object());
    assert!(summary["ate_rmse_m"]["trajectory"].as_f64().unwrap() < 1e-6);
    let csv = std::fs::read_to_string(p.join("ev/cdf.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("e,"));
}
