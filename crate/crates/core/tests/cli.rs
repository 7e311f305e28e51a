use std::path::Path;
use std::process::Command;

fn gcmr() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gcmr"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_overrides(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("small.json");
    std::fs::write(
        &p,
        r#"{"eval_every": 200, "eval_episodes": 2, "t_dm": 300, "dynamics_every": 300,
            "adjacency_first": 300, "high": {"batch_size": 16}, "low": {"batch_size": 16},
            "gcmr": {"osrp_pairs": 4}}"#,
    )
    .unwrap();
    p
}

#[test]
fn short_run_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_overrides(dir.path());
    let run = gcmr()
        .args(["--steps", "600", "--seed", "3", "--dump-graph", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success());
    assert!(String::from_utf8_lossy(&run.stdout).contains("finished 600 steps"));
    let progress = std::fs::read_to_string(out.join("progress.csv")).unwrap();
    let lines: Vec<&str> = progress.lines().collect();
    assert_eq!(lines[0], "step,success_rate,mean_return,final_distance,episodes,high_updates");
    assert_eq!(lines.len(), 4, "one row per evaluation");
    assert!(lines[3].starts_with("600,"));
    let guidance = std::fs::read_to_string(out.join("gcmr.csv")).unwrap();
    assert!(guidance.lines().skip(1).any(|l| l.contains(",gp,")));
    let sidecar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config"]["seed"], 3);
    assert_eq!(sidecar["counters"]["steps"], 600);
    for f in ["low.json", "high.json", "dynamics.json"] {
        assert!(out.join("checkpoints").join(f).exists(), "{f}");
    }
}

#[test]
fn print_config_reflects_flags() {
    let out = gcmr()
        .args(["--algo", "higl-baseline", "--profile", "paper", "--seed", "9", "--print-config"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["algo"], "higl-baseline");
    assert_eq!(v["landmark_loss"], "higl");
    assert_eq!(v["seed"], 9);
    assert_eq!(v["low"]["hidden"], serde_json::json!([300, 300]));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let unknown_algo = gcmr().args(["--algo", "sac", "--print-config"]).output().unwrap();
    assert_eq!(unknown_algo.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown_algo.stderr).contains("unknown algo"));

    let unknown_env = gcmr().args(["--env", "ant_maze", "--print-config"]).output().unwrap();
    assert_eq!(unknown_env.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"gcmr": {"lambda_gp": -1.0}}"#).unwrap();
    let invalid = gcmr().arg("--config").arg(&cfg).arg("--print-config").output().unwrap();
    assert_eq!(invalid.status.code(), Some(2));

    std::fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    let unknown_field = gcmr().arg("--config").arg(&cfg).arg("--print-config").output().unwrap();
    assert_eq!(unknown_field.status.code(), Some(2));
}

#[test]
fn layout_file_matches_builtin_u_shape() {
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../layouts/u_shape.json");
    let loaded = gcmr::env::MazeLayout::load(&file).unwrap();
    assert_eq!(loaded, gcmr::env::MazeLayout::u_shape());

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"name": "x", "bounds": [0, 0, 4, 4], "walls": [[1, 1, 3, 3]], "start": {"fixed": [2.0, 2.0]},
            "eval_start": [2.0, 2.0], "eval_goal": [0.5, 0.5], "train_goals": "uniform_free"}"#,
    )
    .unwrap();
    let out = gcmr().arg("--layout").arg(&bad).arg("--print-config").output().unwrap();
    assert_eq!(out.status.code(), Some(2), "start inside a wall must be rejected");
}
