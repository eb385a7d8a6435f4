use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use pvo_core::io::{self, KeyValues, SolveOutput};
use pvo_core::simworld::{dynamic_demo, static_demo, SceneConfig};

fn pvo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvo"))
        .args(args)
        .env_remove("PVO_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn digest_line(out: &Output) -> String {
    stdout(out).lines().find(|l| l.starts_with("digest ")).unwrap().to_string()
}

fn write_config(dir: &Path, name: &str, cfg: &SceneConfig) -> PathBuf {
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

/// Quarter resolution keeps the CLI runs quick.
fn quarter(mut cfg: SceneConfig) -> SceneConfig {
    cfg.width /= 4;
    cfg.height /= 4;
    cfg.fx /= 4.0;
    cfg.fy /= 4.0;
    cfg.cx /= 4.0;
    cfg.cy /= 4.0;
    cfg
}

fn simulate(config: &Path, out: &Path) -> Output {
    let out = pvo(&["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_ok(&out);
    out
}

fn evaluate(pred: &Path, gt: &Path, k: &str) -> (String, KeyValues) {
    let out = pvo(&["evaluate", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap(), "--k", k]);
    assert_ok(&out);
    let text = stdout(&out);
    let kv_text: String = text.lines().filter(|l| l.contains(" = ")).map(|l| format!("{l}\n")).collect();
    (text, KeyValues::parse(&kv_text).unwrap())
}

fn number(kv: &KeyValues, key: &str) -> f64 {
    kv.get(key).unwrap().parse().unwrap()
}

#[test]
fn simulate_is_reproducible_and_noise_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "static", &static_demo(0));
    let a = simulate(&config, &tmp.path().join("a"));
    let b = simulate(&config, &tmp.path().join("b"));
    assert!(stdout(&a).starts_with("wrote 5 frames to "));
    assert_eq!(digest_line(&a), digest_line(&b));

    let quiet = quarter(dynamic_demo(0, 3, 0.0));
    let noisy = quarter(dynamic_demo(0, 3, 1.0));
    let q = simulate(&write_config(tmp.path(), "quiet", &quiet), &tmp.path().join("q"));
    let n = simulate(&write_config(tmp.path(), "noisy", &noisy), &tmp.path().join("n"));
    assert_ne!(digest_line(&q), digest_line(&n));
}

#[test]
fn solve_modes_agree_on_static_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    simulate(&write_config(tmp.path(), "static", &static_demo(0)), &scene);
    let mut trajectories = Vec::new();
    for mode in ["unweighted", "panoptic", "pipeline"] {
        let out_dir = tmp.path().join(mode);
        let start = Instant::now();
        let out = pvo(&["solve", "--scene", scene.to_str().unwrap(), "--mode", mode, "--out", out_dir.to_str().unwrap()]);
        assert_ok(&out);
        assert!(start.elapsed().as_secs_f64() < 60.0);
        let result = io::read_solve_output(&out_dir).unwrap();
        assert_eq!(result.report.get("mode"), Some(mode));
        trajectories.push(result.trajectory);
    }
    for t in &trajectories[1..] {
        for (a, b) in t.poses().iter().zip(trajectories[0].poses()) {
            assert!(a.compose(&b.inverse()).log().max_abs() < 1e-9);
        }
    }
}

#[test]
fn evaluate_ground_truth_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    simulate(&write_config(tmp.path(), "static", &static_demo(0)), &scene);
    let (text, kv) = evaluate(&scene, &scene, "0,2,4");
    for k in ["k00", "k02", "k04"] {
        assert_eq!(number(&kv, &format!("vpq.{k}")), 1.0);
    }
    assert!(number(&kv, "ate_rmse") < 1e-9);
    assert_eq!(kv.get("alignment"), Some("similarity"));
    let rows = text.lines().filter(|l| l.split_whitespace().count() == 4 && l.trim().starts_with(char::is_numeric));
    assert_eq!(rows.count(), 3);
}

#[test]
fn inconsistent_track_ids_lower_long_window_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_dir = tmp.path().join("scene");
    let cfg = quarter(dynamic_demo(4, 16, 0.0));
    simulate(&write_config(tmp.path(), "dynamic", &cfg), &scene_dir);
    // The per-frame detector ids are reshuffled every frame.
    let scene = io::read_scene(&scene_dir).unwrap();
    let pred = SolveOutput {
        trajectory: scene.gt_trajectory().unwrap(),
        working_intrinsics: scene.intrinsics,
        depths: scene.frames.iter().map(|f| f.gt_depth.clone()).collect(),
        panoptic_video: scene.frames.iter().map(|f| f.obs_panoptic.clone()).collect(),
        report: KeyValues::default(),
    };
    let pred_dir = tmp.path().join("pred");
    io::write_solve_output(&pred_dir, &pred).unwrap();
    let (_, kv) = evaluate(&pred_dir, &scene_dir, "0,15");
    assert!(number(&kv, "vpq.k15") <= number(&kv, "vpq.k00"));
    assert!(number(&kv, "vpq_thing.k15") < number(&kv, "vpq_thing.k00"));
}

#[test]
fn exit_codes() {
    let code = |args: &[&str]| pvo(args).status.code().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["solve", "--scene", "x", "--mode", "fancy"]), 1);
    assert_eq!(code(&["simulate", "--config", "x.toml"]), 1);
    assert_eq!(code(&["--threads", "0", "evaluate", "--pred", "a", "--gt", "b"]), 1);
    assert_eq!(code(&["solve", "--scene", "/nonexistent", "--working-scale", "3", "--out", "/tmp/x"]), 1);

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    assert_eq!(code(&["evaluate", "--pred", missing.to_str().unwrap(), "--gt", missing.to_str().unwrap()]), 2);
    assert_eq!(code(&["solve", "--scene", missing.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]), 2);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "width = \"wide\"\n").unwrap();
    assert_eq!(code(&["simulate", "--config", bad.to_str().unwrap(), "--out", tmp.path().join("s").to_str().unwrap()]), 2);
}

#[test]
fn output_directory_defaults_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "static_demo", &static_demo(0));
    let out = Command::new(env!("CARGO_BIN_EXE_pvo"))
        .args(["simulate", "--config", config.to_str().unwrap()])
        .env("PVO_OUT_DIR", tmp.path().join("runs"))
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(tmp.path().join("runs/static_demo/manifest.txt").is_file());
}
