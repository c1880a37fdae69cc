use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn timealign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timealign")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// The shipped TimeAlign config cut down to two scenes and one epoch.
fn tiny_config(dir: &Path) -> String {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/timealign.json");
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(shipped).unwrap()).unwrap();
    cfg["data"]["num_scenes"] = json!(2);
    cfg["train"]["stages"] = json!([{ "epochs": 1, "lambda_pred": 10.0 }]);
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn simulate_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let cfg = tiny_config(dir.path());

    let out = timealign(&["simulate", "--config", &cfg, "--out", &d("data")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = timealign(&["train", "--config", &cfg, "--data", &d("data"), "--out", &d("run")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["final.ckpt", "best.ckpt", "train_log.json", "config.json"] {
        assert!(dir.path().join("run").join(f).exists(), "{}", f);
    }
    // warm start from the run just written
    let out = timealign(&[
        "train", "--config", &cfg, "--data", &d("data"), "--init", &d("run/final.ckpt"), "--out", &d("run2"),
    ]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipped 0"));

    for lag in ["0", "1"] {
        let out = timealign(&["eval", "--ckpt", &d("run/final.ckpt"), "--data", &d("data"), "--lag", lag]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("AP-Car"));
    }
    let out = timealign(&["report", "--in", &d("run"), "--format", "csv"]);
    assert_eq!(code(&out), 0);
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("TimeAlign,LiDAR(T),"));
    assert!(lines[2].starts_with("TimeAlign,LiDAR Lagging(T-1),"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"model\": 3}").unwrap();
    let bad = bad.to_str().unwrap();
    let out_dir = dir.path().join("out");
    let out_dir = out_dir.to_str().unwrap();
    assert_eq!(code(&timealign(&["simulate", "--config", bad, "--out", out_dir])), 2);
    assert_eq!(code(&timealign(&["eval", "--ckpt", "nowhere.ckpt", "--data", out_dir, "--lag", "1"])), 3);
    assert_eq!(code(&timealign(&["eval", "--ckpt", "x", "--data", "y", "--lag", "7"])), 2);
    assert_eq!(code(&timealign(&["report", "--in", out_dir])), 3);
    assert_eq!(code(&timealign(&["gradcheck", "--module", "nonsense"])), 2);

    let cfg = tiny_config(dir.path());
    let missing = dir.path().join("missing");
    let out = timealign(&["train", "--config", &cfg, "--data", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn gradcheck_single_module() {
    let out = timealign(&["gradcheck", "--module", "head", "--seeds", "1"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}
