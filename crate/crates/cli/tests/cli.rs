use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn lipcde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipcde"))
        .args(args)
        .env("LIPCDE_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lipcde")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn invalid_config_exits_with_two_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[sim]\ngamma_deg = 1.5\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = lipcde(&["train", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));
    assert!(!out_dir.exists());

    std::fs::write(&cfg, "[sim]\nnot_a_key = 1\n").unwrap();
    assert_eq!(lipcde(&["simulate", "--config", p(&cfg)]).status.code(), Some(2));
    let missing = dir.path().join("absent.toml");
    assert_eq!(lipcde(&["simulate", "--config", p(&missing)]).status.code(), Some(2));
}

#[test]
fn simulate_writes_views_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("data");
    let out = lipcde(&["simulate", "--config", p(&tiny()), "--out", p(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["factual.csv", "counterfactual.csv", "factual_miss30.csv", "manifest.json", "config.toml"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["files"].as_array().unwrap().len(), 4);

    let again = lipcde(&["simulate", "--config", p(&tiny()), "--out", p(&out_dir)]);
    assert_eq!(again.status.code(), Some(3));
    let forced = lipcde(&["simulate", "--config", p(&tiny()), "--out", p(&out_dir), "--force"]);
    assert!(forced.status.success());
}

#[test]
fn train_on_ingested_data_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(lipcde(&["simulate", "--config", p(&tiny()), "--out", p(&data)]).status.success());
    let run = dir.path().join("run");
    let out = lipcde(&[
        "train",
        "--config",
        p(&tiny()),
        "--out",
        p(&run),
        "--data",
        p(&data),
        "--variants",
        "full",
        "conf_baseline",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let rows = metrics.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["rmse"].as_f64().unwrap().is_finite()));
    assert!(rows.iter().all(|r| r["wallclock_seconds"].is_null()));
    let losses = std::fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 2 * 2);

    assert!(lipcde(&["plot", "--config", p(&tiny()), "--out", p(&run)]).status.success());
    let svg = std::fs::read_to_string(run.join("rmse_vs_gamma.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn evaluate_reports_one_row_per_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("sweep");
    let out = lipcde(&["evaluate", "--config", p(&tiny()), "--out", p(&run), "--seeds", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(run.join("rmse_vs_gamma.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "gamma,full");
    assert_eq!(lines.len(), 3);
    assert!(run.join("rmse_vs_gamma.svg").exists());
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let out = lipcde(&["train", "--config", p(&tiny()), "--variants", "nope"]);
    assert!(!out.status.success());
}
