use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SPHERE_EQUI: &str = r#"
[model]
kind = "sphere"
degree = 1

[ensemble]
kind = "gaussian"
sigma = 1.0

[seed]
master = 11

[experiment]
kind = "equidistribution"
p = [2, 4, 8]
region = { kind = "chart-disk", center = [0.0, 0.0], radius = 1.0 }
delta = 0.3
n_trials = 600
"#;

fn run(dir: &TempDir, config: &str, args: &[&str]) -> Output {
    let path = dir.path().join("config.toml");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_cusplab"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("runs"))
        .output()
        .unwrap()
}

fn run_dir(out: &Output) -> PathBuf {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn runs(dir: &TempDir) -> Vec<PathBuf> {
    match fs::read_dir(dir.path().join("runs")) {
        Ok(rd) => rd.map(|e| e.unwrap().path()).collect(),
        Err(_) => Vec::new(),
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn reports_are_byte_identical_across_workers_and_reruns() {
    let dir = TempDir::new().unwrap();
    let a = run_dir(&run(&dir, SPHERE_EQUI, &["experiment", "--workers", "1"]));
    let b = run_dir(&run(&dir, SPHERE_EQUI, &["experiment", "--workers", "8"]));
    let c = run_dir(&run(&dir, SPHERE_EQUI, &["experiment", "--workers", "1"]));
    assert_ne!(a, b);
    for name in ["equidistribution.json", "deviation.csv", "hole.csv", "count.csv"] {
        let x = fs::read(a.join(name)).unwrap();
        assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name}");
        assert_eq!(x, fs::read(c.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn outputs_embed_config_and_hash() {
    let dir = TempDir::new().unwrap();
    let out = run_dir(&run(&dir, SPHERE_EQUI, &["experiment"]));
    let doc = read_json(&out.join("equidistribution.json"));
    let hash = doc["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(out.file_name().unwrap().to_str().unwrap().starts_with(&hash[..16]));
    assert_eq!(doc["config"]["seed"], 11);
    assert_eq!(doc["config"]["experiment"]["kind"], "equidistribution");
    let csv = fs::read_to_string(out.join("deviation.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash: {hash}\n")));
    assert!(csv.lines().nth(2).unwrap() == "p,estimate,ci_low,ci_high,n_trials,n_events");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let a = run_dir(&run(&dir, SPHERE_EQUI, &["experiment", "--seed", "12"]));
    let b = run_dir(&run(&dir, SPHERE_EQUI, &["experiment"]));
    let (da, db) = (read_json(&a.join("equidistribution.json")), read_json(&b.join("equidistribution.json")));
    assert_eq!(da["config"]["seed"], 12);
    assert_ne!(da["config_hash"], db["config_hash"]);
    assert_ne!(da["report"], db["report"]);
}

#[test]
fn validation_failures_exit_2_without_output() {
    let dir = TempDir::new().unwrap();
    let cases = [
        "[model]\nkind = \"cusped-sphere\"\nblend = [0.5, 0.1]\n",
        "[model]\nkind = \"torus\"\n",
        "[model]\nkind = \"sphere\"\n[experiment]\nkind = \"holes\"\np = [1, 2]\n",
        "[model]\nkind = \"punctured-disk\"\n[experiment]\nkind = \"holes\"\np = [2]\n",
        "[model]\nkind = \"sphere\"\n[ensemble]\nkind = \"gaussian\"\nsigma = 0.0\n[experiment]\nkind = \"holes\"\n",
        "[model]\nkind = \"sphere\"\n[experiment]\nkind = \"supnorm\"\ngrid = 0.5\nregion = { kind = \"chart-disk\", center = [0.0, 0.0], radius = 1.0 }\n",
    ];
    for cfg in cases {
        let out = run(&dir, cfg, &["experiment"]);
        assert_eq!(out.status.code(), Some(2), "{cfg}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = run(&dir, "[model]\nkind = \"cusped-sphere\"\nblend = [0.5, 0.1]\n", &["model-check"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(runs(&dir).is_empty());
}

#[test]
fn model_check_passes_for_shipped_models() {
    let dir = TempDir::new().unwrap();
    for kind in ["punctured-disk", "sphere", "cusped-sphere"] {
        let out = run_dir(&run(&dir, &format!("[model]\nkind = \"{kind}\"\n"), &["model-check"]));
        let doc = read_json(&out.join("model_check.json"));
        assert_eq!(doc["report"]["conditions"]["pass"], true, "{kind}");
    }
}

#[test]
fn basis_export_reports_dimensions() {
    let dir = TempDir::new().unwrap();
    let out = run_dir(&run(&dir, "[model]\nkind = \"sphere\"\n[experiment]\np = [5]\n", &["basis"]));
    let doc = read_json(&out.join("basis_p5.json"));
    assert_eq!(doc["report"]["d_p"], 6);
    let dims = read_json(&out.join("dimension_check.json"));
    assert_eq!(dims["report"][0]["d_p"], 6);

    let cfg = "[model]\nkind = \"punctured-disk\"\n[experiment]\np = [2]\ntruncation = { kind = \"terms\", count = 10 }\n";
    let out = run_dir(&run(&dir, cfg, &["basis"]));
    let doc = read_json(&out.join("basis_p2.json"));
    assert_eq!(doc["report"]["d_p"], 10);
    assert_eq!(doc["report"]["truncated"], true);
}

#[test]
fn bergman_diagonal_is_normalized() {
    let dir = TempDir::new().unwrap();
    let cfg = "[model]\nkind = \"punctured-disk\"\n[experiment]\np = [4, 8]\ntruncation = { kind = \"radius\", r_max = 0.9 }\n";
    let out = run_dir(&run(&dir, cfg, &["bergman"]));
    let csv = fs::read_to_string(out.join("diagonal.csv")).unwrap();
    let mut n = 0;
    for line in csv.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let normalized: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!((normalized - 1.0).abs() < 1e-12);
        n += 1;
    }
    assert_eq!(n, 800);
    let summary = read_json(&out.join("bergman.json"));
    let ratio = summary["report"][1]["disk_sup_ratio"].as_f64().unwrap();
    assert!(ratio > 0.5 && ratio < 1.5, "{ratio}");
}

#[test]
fn hole_lower_bound_only_for_gaussian() {
    let dir = TempDir::new().unwrap();
    let base = "[model]\nkind = \"punctured-disk\"\n[experiment]\nkind = \"holes\"\np = [2, 3]\nn_trials = 200\nregion = { kind = \"chart-annulus\", r_inner = 0.01, r_outer = 0.3 }\ntruncation = { kind = \"radius\", r_max = 0.3 }\n";
    let g = run_dir(&run(&dir, base, &["experiment"]));
    assert!(g.join("lower_bound.csv").exists());
    let u = format!("{base}[ensemble]\nkind = \"uniform-disk\"\nradius_rule = {{ rule = \"constant\", value = 1.0 }}\n");
    let u = run_dir(&run(&dir, &u, &["experiment"]));
    assert!(!u.join("lower_bound.csv").exists());
    assert!(u.join("holes.json").exists());
}
