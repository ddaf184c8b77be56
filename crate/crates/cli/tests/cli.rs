use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn nudich(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nudich"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("NUDICH_CONFIG")
        .env_remove("NUDICH_EXAMPLE")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn spectrum_of_a_diagonal_config() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("diag.toml");
    fs::write(&cfg, "[system]\nname = \"d\"\ndimension = 2\n\n[matrix]\na_1_1 = \"-1\"\na_1_2 = \"0\"\na_2_1 = \"0\"\na_2_2 = \"2\"\n").unwrap();
    let out = dir.path().join("run");
    let o = nudich(&["spectrum", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&out.join("spectrum.json"));
    let ivs = doc["summary"]["intervals"].as_array().unwrap();
    assert_eq!(ivs.len(), 2);
    assert!(ivs[0]["lo"].as_f64().unwrap() <= -1.0 && ivs[0]["hi"].as_f64().unwrap() >= -1.0);
    assert!(ivs[1]["lo"].as_f64().unwrap() <= 2.0 && ivs[1]["hi"].as_f64().unwrap() >= 2.0);
    assert_eq!(doc["manifest"]["config"].as_str(), Some(cfg.to_str().unwrap()));
    assert!(out.join("manifest.json").exists());
    assert!(fs::read_to_string(out.join("classification.csv")).unwrap().starts_with("gamma,verdict"));
}

#[test]
fn nonuniform_example_is_flagged() {
    let dir = TempDir::new().unwrap();
    let o = nudich(&["spectrum", "--example", "barreira-valls"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&dir.path().join("spectrum.json"));
    assert_eq!(doc["summary"]["nonuniform"], Value::Bool(true));
}

#[test]
fn missing_config_names_the_path() {
    let dir = TempDir::new().unwrap();
    let o = nudich(&["spectrum", "--config", "/no/such/system.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/system.toml"));
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn triangular_reduction_writes_grids() {
    let dir = TempDir::new().unwrap();
    let o = nudich(&["reduce", "--example", "triangular"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&dir.path().join("blocks/blocks.json"));
    assert_eq!(doc["block_sizes"], serde_json::json!([1, 1]));
    assert!(doc["diagnostics"]["coupling"].as_f64().unwrap() < 1e-4);
    for f in ["S.csv", "S_inv.csv", "B.csv"] {
        let text = fs::read_to_string(dir.path().join("blocks").join(f)).unwrap();
        assert!(text.lines().count() > 100, "{f}");
    }
}

#[test]
fn single_interval_reduction_says_so() {
    let dir = TempDir::new().unwrap();
    let o = nudich(&["reduce", "--example", "rotation"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("single spectral interval"));
    assert_eq!(json(&dir.path().join("blocks/blocks.json"))["single_block"], Value::Bool(true));
}

#[test]
fn resonant_term_is_kept_and_verified() {
    let dir = TempDir::new().unwrap();
    let o = nudich(&["normalform", "--example", "poincare-2d", "--window", "-40", "40", "--degree", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&dir.path().join("nf/normalform.json"));
    let g = doc["degrees"][0]["g"].as_array().unwrap();
    assert_eq!(g.len(), 1);
    assert_eq!(g[0]["component"], 2);
    assert_eq!(g[0]["monomial"], serde_json::json!([2, 0]));
    assert!((g[0]["value"].as_f64().unwrap() - 1.0).abs() < 1e-8);
    assert!(dir.path().join("nf/h_2.csv").exists() && dir.path().join("nf/g_2.csv").exists());

    let v = nudich(&["verify"], dir.path());
    assert_eq!(v.status.code(), Some(0), "{}", stderr(&v));
    let report = json(&dir.path().join("verify.json"));
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == Value::Bool(true)));
}

#[test]
fn zero_nonlinearity_gives_empty_forms_and_residuals() {
    let dir = TempDir::new().unwrap();
    let o = nudich(&["normalform", "--example", "zero", "--degree", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&dir.path().join("nf/normalform.json"));
    assert!(doc["degrees"][0]["h"].as_array().unwrap().is_empty());
    assert!(doc["degrees"][0]["g"].as_array().unwrap().is_empty());
    let v = nudich(&["verify"], dir.path());
    assert_eq!(v.status.code(), Some(0), "{}", stderr(&v));
    let report = json(&dir.path().join("verify.json"));
    assert!(report["residual"]["max_residual"].as_array().unwrap().iter().all(|r| r.as_f64() == Some(0.0)));
}

#[test]
fn corrupted_artifact_fails_verification() {
    let dir = TempDir::new().unwrap();
    let o = nudich(&["reduce", "--example", "triangular"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let path = dir.path().join("blocks/S.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut cols: Vec<String> = lines[5].split(',').map(str::to_string).collect();
    cols[1] = "7.5".into();
    lines[5] = cols.join(",");
    fs::write(&path, lines.join("\n")).unwrap();
    let v = nudich(&["verify"], dir.path());
    assert_eq!(v.status.code(), Some(1));
    assert!(stderr(&v).contains("failed"), "{}", stderr(&v));

    fs::write(&path, "t,S_1_1\nnot a number\n").unwrap();
    let v = nudich(&["verify"], dir.path());
    assert_eq!(v.status.code(), Some(1));
    assert!(stderr(&v).contains("S.csv"));
}

#[test]
fn degree_above_the_cap_is_an_error() {
    let dir = TempDir::new().unwrap();
    let o = nudich(&["normalform", "--example", "diag-1-2", "--degree", "11"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cap"));
}

#[test]
fn environment_overrides_flags() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_nudich"))
        .args(["spectrum", "--out"])
        .arg(dir.path())
        .env("NUDICH_EXAMPLE", "diag-1-2")
        .env("NUDICH_WINDOW", "-10,10")
        .env("NUDICH_TOL_GAMMA", "0.1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["window"], serde_json::json!([-10.0, 10.0]));
    assert_eq!(m["tolerances"]["gamma"].as_f64(), Some(0.1));
}

#[test]
fn reports_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("same");
    let run = || {
        let o = nudich(&["normalform", "--example", "diag-1-2", "--degree", "2"], &out);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        ["spectrum.json", "blocks/blocks.json", "nf/normalform.json"].map(|f| fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run(), run());
}
