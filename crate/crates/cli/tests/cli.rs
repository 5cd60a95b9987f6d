use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
ref_resolution = 16
eval_resolutions = 8,16
schedule.T = 10
n_fit = 8
n_calibration = 8
n_eval = 16
diagnose.sigmas = 0,0.5,1
diagnose.n_ssim = 4
diagnose.n_curve = 4
";

fn flowcal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowcal"))
        .arg("--config")
        .arg(dir.join("run.cfg"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env_remove("FLOWCAL_SEED")
        .output()
        .unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), format!("{SMALL}{extra}")).unwrap();
    dir
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn full_workflow_writes_every_artifact() {
    let dir = setup("");
    let d = dir.path();
    assert!(ok(flowcal(d, &["fit"])).contains("alpha"));
    ok(flowcal(d, &["calibrate"]));
    ok(flowcal(d, &["sample", "--resolution", "16", "--n", "3"]));
    ok(flowcal(d, &["diagnose"]));
    let summary = ok(flowcal(d, &["report"]));
    assert!(summary.contains("16x16") && summary.contains("FD default"));

    for f in ["params/wiener.json", "tables/linear/8x8.json", "tables/linear/16x16.json", "metadata.json"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    for i in 0..3 {
        assert!(d.join(format!("out/samples/linear/16x16/calibrated/sample_{i:04}.bin")).exists());
    }
    let rows = |f: &str| read(d, &format!("reports/{f}")).lines().count() - 1;
    assert_eq!(rows("ssim_curves.csv"), 2 * 3);
    assert_eq!(rows("reverse_mse.csv"), 2 * 2 * 10);
    assert_eq!(rows("sigma_hat_vs_default.csv"), 2 * 2 * 10);
    assert_eq!(rows("fd_report.csv"), 2);
    assert!(read(d, "reports/fd_report.csv").starts_with("resolution,fd_default,fd_calibrated"));
    for svg in ["ssim_curves", "reverse_mse", "sigma_hat_vs_default", "fd_report"] {
        assert!(read(d, &format!("reports/{svg}.svg")).contains("<svg"));
    }
    assert!(!d.join("out/.flowcal.lock").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = setup("");
    let d = dir.path();
    ok(flowcal(d, &["fit"]));
    ok(flowcal(d, &["calibrate"]));
    let (p, t) = (read(d, "params/wiener.json"), read(d, "tables/linear/16x16.json"));
    ok(flowcal(d, &["fit"]));
    ok(flowcal(d, &["calibrate"]));
    assert_eq!(p, read(d, "params/wiener.json"));
    assert_eq!(t, read(d, "tables/linear/16x16.json"));
    let table: serde_json::Value = serde_json::from_str(&t).unwrap();
    assert_eq!(table["T"], 10);
}

#[test]
fn no_table_matches_a_table_of_defaults() {
    let dir = setup("model.kind = analytic\n");
    let d = dir.path();
    // a table holding the default conditioning, written by hand
    let steps = 10;
    let defaults: Vec<f64> = (1..=steps).map(|t| t as f64 / steps as f64).collect();
    let table = serde_json::json!({
        "width": 8, "height": 8, "T": steps, "schedule_kind": "linear",
        "sigmas_hat": defaults, "losses": vec![0.0; steps], "n_samples": 0, "seed": 0
    });
    let path = d.join("out/tables/linear/8x8.json");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, table.to_string()).unwrap();
    ok(flowcal(d, &["sample", "--resolution", "8", "--n", "2"]));
    ok(flowcal(d, &["sample", "--resolution", "8", "--n", "2", "--no-table"]));
    for i in 0..2 {
        let name = format!("sample_{i:04}.bin");
        let a = std::fs::read(d.join("out/samples/linear/8x8/calibrated").join(&name)).unwrap();
        let b = std::fs::read(d.join("out/samples/linear/8x8/default").join(&name)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn missing_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowcal(dir.path(), &["fit"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_value_exits_two() {
    let dir = setup("schedule.kind = cosine\n");
    assert_eq!(flowcal(dir.path(), &["fit"]).status.code(), Some(2));
    let dir = setup("unknown.key = 1\n");
    assert_eq!(flowcal(dir.path(), &["fit"]).status.code(), Some(2));
}

#[test]
fn env_override_reaches_the_config() {
    let dir = setup("");
    let out = Command::new(env!("CARGO_BIN_EXE_flowcal"))
        .arg("--config")
        .arg(dir.path().join("run.cfg"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("fit")
        .env("FLOWCAL_N_FIT", "4")
        .output()
        .unwrap();
    // n_fit = 4 is below the fitting minimum, so the override must surface as a config error
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn tampered_table_exits_three() {
    let dir = setup("model.kind = analytic\n");
    let d = dir.path();
    ok(flowcal(d, &["calibrate"]));
    let path = d.join("out/tables/linear/16x16.json");
    let mut table: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    table["sigmas_hat"][3] = serde_json::json!(0.99);
    std::fs::write(&path, table.to_string()).unwrap();
    let out = flowcal(d, &["sample", "--resolution", "16", "--n", "1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn held_lock_refuses_to_run() {
    let dir = setup("model.kind = analytic\n");
    let d = dir.path();
    std::fs::create_dir_all(d.join("out")).unwrap();
    std::fs::write(d.join("out/.flowcal.lock"), "").unwrap();
    let out = flowcal(d, &["calibrate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}
