use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn keypose(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_keypose"))
        .args(args)
        .env("KEYPOSE_WORKERS", "2")
        .output()
        .unwrap();
    out.status.code().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn read(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Noiseless scenario with a small depth sequence.
fn scenario(dir: &Path) -> PathBuf {
    let sc = dir.join("scenario");
    assert_eq!(
        keypose(&["synth", "-o", &s(&sc), "--seed", "3", "--frames", "6", "--depth-frames", "2"]),
        0
    );
    sc
}

#[test]
fn synth_basis_solve_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path());
    let mut instances: Vec<String> = std::fs::read_dir(sc.join("instances"))
        .unwrap()
        .map(|e| s(&e.unwrap().path()))
        .collect();
    instances.sort();
    let basis = tmp.path().join("basis.json");
    let mut args = vec!["build-basis", "-o", basis.to_str().unwrap(), "--components", "2"];
    args.extend(instances.iter().map(String::as_str));
    assert_eq!(keypose(&args), 0);

    let poses = tmp.path().join("poses");
    let intr = s(&sc.join("intrinsics.json"));
    let code = keypose(&[
        "solve",
        "--basis",
        &s(&basis),
        "--observations",
        &s(&sc.join("observations")),
        "--intrinsics",
        &intr,
        "-o",
        &s(&poses),
        "--lambda",
        "0",
    ]);
    assert_eq!(code, 0);
    let first = read(&poses.join("000000.json"));
    assert_eq!(first["status"], "ok");
    assert!(first["full"]["cost"].as_f64().unwrap() < 1e-12);

    let eval = tmp.path().join("eval");
    let code = keypose(&[
        "evaluate",
        "--poses",
        &s(&poses),
        "--gt",
        &s(&sc.join("gt")),
        "--model",
        &s(&sc.join("object.ply")),
        "--intrinsics",
        &intr,
        "-o",
        &s(&eval),
    ]);
    assert_eq!(code, 0);
    let summary = read(&eval.join("summary.json"));
    assert!(summary["median_rotation_deg"].as_f64().unwrap() < 1e-6);
    assert_eq!(summary["ar"].as_f64().unwrap(), 1.0);
    let csv = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn solve_without_intrinsics_is_weak_only() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path());
    let poses = tmp.path().join("poses");
    let code = keypose(&[
        "solve",
        "--basis",
        &s(&sc.join("basis.json")),
        "--observations",
        &s(&sc.join("observations")),
        "-o",
        &s(&poses),
    ]);
    assert_eq!(code, 0);
    let pose = read(&poses.join("000003.json"));
    assert!(pose["full"].is_null());
    assert!(pose["weak"]["scale"].as_f64().unwrap() > 0.0);
}

#[test]
fn solve_from_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path());
    let poses = tmp.path().join("poses");
    let code = keypose(&[
        "solve",
        "--basis",
        &s(&sc.join("basis.json")),
        "--heatmaps",
        &s(&sc.join("heatmaps")),
        "--intrinsics",
        &s(&sc.join("intrinsics.json")),
        "-o",
        &s(&poses),
    ]);
    assert_eq!(code, 0);
    assert_eq!(std::fs::read_dir(&poses).unwrap().count(), 6);
}

#[test]
fn too_few_keypoints_is_a_frame_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path());
    let path = sc.join("observations").join("000002.json");
    let mut obs = read(&path);
    for (i, kp) in obs["keypoints"].as_array_mut().unwrap().iter_mut().enumerate() {
        if i >= 3 {
            kp["confidence"] = 0.0.into();
        }
    }
    std::fs::write(&path, serde_json::to_string(&obs).unwrap()).unwrap();
    let poses = tmp.path().join("poses");
    let code = keypose(&[
        "solve",
        "--basis",
        &s(&sc.join("basis.json")),
        "--observations",
        &s(&sc.join("observations")),
        "-o",
        &s(&poses),
    ]);
    assert_eq!(code, 1);
    let failed = read(&poses.join("000002.json"));
    assert_eq!(failed["status"], "failed");
    assert!(failed["error"].is_string());
    assert_eq!(read(&poses.join("000001.json"))["status"], "ok");
}

#[test]
fn invalid_input_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path());
    let poses = s(&tmp.path().join("poses"));
    let obs = s(&sc.join("observations"));

    let missing = s(&tmp.path().join("nope.json"));
    assert_eq!(keypose(&["solve", "--basis", &missing, "--observations", &obs, "-o", &poses]), 2);

    let cfg = tmp.path().join("config.json");
    std::fs::write(&cfg, r#"{"solve": {"solver": {"lamda": 1.0}}}"#).unwrap();
    assert_eq!(
        keypose(&[
            "--config",
            &s(&cfg),
            "solve",
            "--basis",
            &s(&sc.join("basis.json")),
            "--observations",
            &obs,
            "-o",
            &poses
        ]),
        2
    );

    std::fs::write(&cfg, r#"{"solve": {"solver": {"lambda": -1.0}}}"#).unwrap();
    assert_eq!(
        keypose(&[
            "--config",
            &s(&cfg),
            "solve",
            "--basis",
            &s(&sc.join("basis.json")),
            "--observations",
            &obs,
            "-o",
            &poses
        ]),
        2
    );

    assert_eq!(keypose(&["synth", "-o", &s(&tmp.path().join("x")), "--outlier-fraction", "1.5"]), 2);
}

#[test]
fn evaluate_rejects_unmatched_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path());
    let poses = tmp.path().join("poses");
    let intr = s(&sc.join("intrinsics.json"));
    assert_eq!(
        keypose(&[
            "solve",
            "--basis",
            &s(&sc.join("basis.json")),
            "--observations",
            &s(&sc.join("observations")),
            "--intrinsics",
            &intr,
            "-o",
            &s(&poses)
        ]),
        0
    );
    std::fs::remove_file(sc.join("gt").join("000004.json")).unwrap();
    let code = keypose(&[
        "evaluate",
        "--poses",
        &s(&poses),
        "--gt",
        &s(&sc.join("gt")),
        "--model",
        &s(&sc.join("object.ply")),
        "--intrinsics",
        &intr,
        "-o",
        &s(&tmp.path().join("eval")),
    ]);
    assert_eq!(code, 2);
}

fn annotate(sc: &Path, out: &Path, mode: &str, trajectory: &str) -> i32 {
    keypose(&[
        "annotate",
        "--mesh",
        &s(&sc.join("scene.ply")),
        "--trajectory",
        &s(&sc.join(trajectory)),
        "--keypoints",
        &s(&sc.join("keypoints3d.json")),
        "--depth-dir",
        &s(&sc.join("depth")),
        "--intrinsics",
        &s(&sc.join("intrinsics.json")),
        "--mode",
        mode,
        "-o",
        &s(out),
    ])
}

#[test]
fn annotate_project_writes_keypoints_and_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path());
    let out = tmp.path().join("ann");
    assert_eq!(annotate(&sc, &out, "project", "trajectory_gt.txt"), 0);
    let file = read(&out.join("000000.json"));
    let kps = file["keypoints"].as_array().unwrap();
    assert_eq!(kps.len(), 8);
    assert!(kps.iter().any(|k| k["visibility"] == "visible"));
    assert!(kps.iter().all(|k| k["refinement"] == "none"));
    assert!(out.join("heatmaps").join("000001.khm").is_file());
}

#[test]
fn annotate_refine_modes_run() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path());
    let obj = tmp.path().join("obj");
    assert_eq!(annotate(&sc, &obj, "refine-object", "trajectory_drift.txt"), 0);
    assert!(read(&obj.join("000001.json"))["camera_pose"].is_object());
    let kp = tmp.path().join("kp");
    assert_eq!(annotate(&sc, &kp, "refine-keypoint", "trajectory_drift.txt"), 0);
    assert_eq!(read(&kp.join("000000.json"))["keypoints"].as_array().unwrap().len(), 8);
}

#[test]
fn annotate_with_no_depth_frames_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path());
    std::fs::remove_dir_all(sc.join("depth")).unwrap();
    std::fs::create_dir(sc.join("depth")).unwrap();
    assert_eq!(annotate(&sc, &tmp.path().join("ann"), "project", "trajectory_gt.txt"), 1);
}
