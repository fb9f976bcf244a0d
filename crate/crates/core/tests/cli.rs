use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_residual-lab"))
}

fn csv_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bin().output().unwrap().status.code(), Some(2));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["omega-sim", "--trials", "10", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = bin().args(["curves", "--out"]).arg(blocker.join("sub")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn adam_kappa_reports_3200() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["adam-kappa", "--d", "1024", "--alpha", "1e-4", "--eps", "1e-6", "--tmax", "20", "--out"])
        .arg(dir.path())
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let files = csv_files(dir.path());
    assert_eq!(files.len(), 1);
    let name = files[0].file_name().unwrap().to_string_lossy().into_owned();
    let parts: Vec<&str> = name.trim_end_matches(".csv").rsplitn(2, '-').collect();
    assert_eq!(parts[0].len(), 8);
    assert!(parts[1].starts_with("adam-kappa-0"));
    let text = fs::read_to_string(&files[0]).unwrap();
    let mut lines = text.lines();
    let meta: serde_json::Value = serde_json::from_str(lines.next().unwrap().trim_start_matches("# ")).unwrap();
    assert_eq!(meta["config"]["d"], 1024);
    assert_eq!(meta["seed"], 0);
    assert_eq!(lines.next().unwrap(), "t,sigma_g,kappa,seed");
    let row = lines.find(|l| l.starts_with("1,0,")).unwrap();
    let kappa: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    assert!((kappa - 3200.0).abs() / 3200.0 < 1e-6);
    let sidecar = files[0].with_extension("json");
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar).unwrap()).unwrap();
    assert!(side["timestamp_unix"].as_u64().is_some());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["gradcheck", "--variant", "residual", "--depth", "3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"variant": "pre_ln", "depth": 6, "seed": 4}"#).unwrap();
    let status = bin()
        .args(["curves", "--depth", "9", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .env("RESIDUAL_LAB_THREADS", "1")
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let files = csv_files(dir.path());
    let text = fs::read_to_string(&files[0]).unwrap();
    assert!(files[0].to_string_lossy().contains("curves-4-"));
    let meta: serde_json::Value = serde_json::from_str(text.lines().next().unwrap().trim_start_matches("# ")).unwrap();
    assert_eq!(meta["config"]["variant"], "pre_ln");
    assert_eq!(meta["config"]["depth"], 9);
    assert_eq!(text.lines().count(), 2 + 9);
    let widths: Vec<usize> = text.lines().skip(1).map(|l| l.split(',').count()).collect();
    assert!(widths.iter().all(|&w| w == 3));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["curves", "--out"])
        .arg(dir.path())
        .env("RESIDUAL_LAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn one_file_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["output-diff", "--depths", "2,3", "--trials", "1000", "--seed", "5,6,7", "--out"])
        .arg(dir.path())
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert_eq!(csv_files(dir.path()).len(), 3);
}
