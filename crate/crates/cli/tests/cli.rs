use std::path::Path;
use std::process::Command;

fn gca(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_gca")).args(args).output().expect("gca runs");
    assert!(out.status.success(), "gca {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn smoke() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json").display().to_string()
}

#[test]
fn gen_data_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let (data_s, run_s, cfg) = (data.display().to_string(), run.display().to_string(), smoke());

    gca(&["gen-data", "--config", &cfg, "--count", "3", "--out", &data_s]);
    let ann = data.join("annotations.json");
    assert!(ann.exists());
    assert_eq!(std::fs::read_dir(data.join("images")).unwrap().count(), 3);

    let stdout = gca(&["train", "--config", &cfg, "--coco", &ann.display().to_string(), "--out", &run_s]);
    assert!(stdout.contains("iterations      6"), "{stdout}");
    assert!(run.join("final.gcac").exists());

    let ckpt = run.join("final.gcac").display().to_string();
    let stdout = gca(&["eval", "--checkpoint", &ckpt, "--out", &run_s]);
    assert!(stdout.contains("mean"), "{stdout}");
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["iteration"], 6);
    assert!(metrics["ap"]["map"].as_f64().unwrap() >= 0.0);
}

#[test]
fn rejects_bad_pool_size() {
    let out = Command::new(env!("CARGO_BIN_EXE_gca")).args(["bench", "--pool-size", "16by16"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("MxN"));
}

#[test]
fn gradcheck_ops_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let stdout = gca(&["gradcheck", "--scope", "ops", "--out", &out]);
    assert!(stdout.contains("PASS"));
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(reports[0]["passed"], true);
}
