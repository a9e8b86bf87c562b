use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

const SMALL: &str = r#"
[reference]
h_boundary = 0.5
h_interior = 0.4
n_theta = 8
n_omega = 16

[expansion]
n_eta = 60
n_phi = 16
n_boundary = 8

[milne.grid]
n_eta = 60
n_phi = 16

[transport.grid]
n_theta = 16
n_omega = 32
radial = { kind = "uniform", n = 16 }
"#;

const FOURIER: &str = r#"
[profile]
kind = "fourier-mode"
mean = 0.5
k = 2
amp = 0.2
aniso = 0.15
tilt = 0.1
"#;

fn kinlab(dir: &Path, args: &[&str], config: &str, env: &[(&str, &str)]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kinlab"));
    cmd.args(args).arg("--config").arg(&cfg);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("KINLAB_")) {
        cmd.env_remove(k);
    }
    cmd.envs(env.iter().copied());
    cmd.output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn milne_constant_datum() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("m");
    let cfg = format!("eps = 0.1\n[profile]\nkind = \"constant\"\nvalue = 3.0\n{SMALL}");
    let o = kinlab(tmp.path(), &["milne", "--out", out.to_str().unwrap()], &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = json(&out.join("summary.json"));
    assert!((s["solution"]["f_L"].as_f64().unwrap() - 3.0).abs() < 1e-8);
    assert!(s["solution"]["residual"].as_f64().unwrap() < 1e-8);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["command"], "milne");
    assert_eq!(m["config"]["eps"], 0.1);
    assert!(out.join("solution.csv").exists());
}

#[test]
fn env_overrides_file_and_flags_override_env() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("m");
    let cfg = format!("eps = 0.3\nseed = 5\n{SMALL}");
    let o = kinlab(
        tmp.path(),
        &["milne", "--out", out.to_str().unwrap(), "--seed", "9"],
        &cfg,
        &[("KINLAB_EPS", "0.2"), ("KINLAB_SEED", "7"), ("KINLAB_MILNE__GRID__N_ETA", "40")],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["config"]["eps"], 0.2);
    assert_eq!(m["config"]["milne"]["grid"]["n_eta"], 40);
    assert_eq!(m["seed"], 9);
}

#[test]
fn flat_layer_has_no_force() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("f");
    let cfg = format!("eps = 0.1\nflat = true\n{SMALL}{FOURIER}");
    let o = kinlab(tmp.path(), &["milne", "--out", out.to_str().unwrap()], &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&out.join("summary.json"))["geometric"], false);
    let mut r = csv::Reader::from_path(out.join("solution.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    let (fi, zi) = (h.iter().position(|c| c == "F").unwrap(), h.iter().position(|c| c == "zeta").unwrap());
    for rec in r.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[fi].parse::<f64>().unwrap(), 0.0);
        let z: f64 = rec[zi].parse().unwrap();
        assert!((0.0..=1.0).contains(&z));
    }
}

#[test]
fn missing_epsilon_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("x");
    for cmd in ["milne", "transport", "expand", "decompose"] {
        let o = kinlab(tmp.path(), &[cmd, "--out", out.to_str().unwrap()], SMALL, &[]);
        assert_eq!(o.status.code(), Some(1), "{cmd}");
        assert!(stderr(&o).contains("epsilon"), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn unknown_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let o = kinlab(tmp.path(), &["milne"], "eps = 0.1\nepsilon = 0.2\n", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epsilon"));
}

#[test]
fn converge_needs_three_values() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("c");
    let cfg = format!("eps_list = [0.1, 0.05]\n{SMALL}");
    let o = kinlab(tmp.path(), &["converge", "--out", out.to_str().unwrap()], &cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("need at least 3"), "{}", stderr(&o));
}

#[test]
fn converge_writes_report_and_fit() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("c");
    let cfg = format!("eps_list = [0.1, 0.05, 0.025]\ncompare_flat = true\n{SMALL}{FOURIER}");
    let o = kinlab(tmp.path(), &["converge", "--out", out.to_str().unwrap()], &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7, "{csv}");
    assert!(csv.lines().next().unwrap().starts_with("variant,eps"));
    let s = json(&out.join("summary.json"));
    assert!(s["slope"].as_f64().unwrap() > 0.0);
    assert_eq!(s["variants"].as_array().unwrap().len(), 2);
    assert_eq!(s["diagnostics"].as_array().unwrap().len(), 3);
}

#[test]
fn under_resolved_study_exits_three_with_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("c");
    let cfg = format!("eps_list = [0.2, 0.1, 0.05]\nresolution_ratio = 0.001\n{SMALL}{FOURIER}");
    let o = kinlab(tmp.path(), &["converge", "--out", out.to_str().unwrap()], &cfg, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("under-resolved"));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.contains(",true"));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn transport_preserves_constants() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("t");
    let cfg = format!("eps = 0.1\n[profile]\nkind = \"constant\"\nvalue = 7.0\n{SMALL}");
    let o = kinlab(tmp.path(), &["transport", "--out", out.to_str().unwrap()], &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = json(&out.join("summary.json"));
    assert!((s["min"].as_f64().unwrap() - 7.0).abs() < 1e-10);
    assert!((s["max"].as_f64().unwrap() - 7.0).abs() < 1e-10);
    let mut r = csv::Reader::from_path(out.join("field.csv")).unwrap();
    assert!(r.headers().unwrap().iter().any(|h| h == "u"), "{:?}", r.headers());
}

#[test]
fn expand_reports_consistency_and_norms() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("e");
    let cfg = format!("eps = 0.1\n{SMALL}{FOURIER}");
    let o = kinlab(tmp.path(), &["expand", "--out", out.to_str().unwrap()], &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = json(&out.join("summary.json"));
    assert!(s["boundary_consistency"].as_f64().unwrap() < 1e-6);
    let linf = s["norms"]["linf"].as_f64().unwrap();
    assert!(linf > 0.0 && linf < 0.2, "{linf}");
    assert_eq!(s["nodes"].as_array().unwrap().len(), 8);
    let mut r = csv::Reader::from_path(out.join("composite.csv")).unwrap();
    assert_eq!(r.headers().unwrap().len(), 6);
    assert!(r.records().count() > 0);
}

#[test]
fn decompose_mixes_with_lambda_in_unit_interval() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    let cfg = format!("eps = 0.1\n{SMALL}{FOURIER}");
    let o = kinlab(tmp.path(), &["decompose", "--out", out.to_str().unwrap()], &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = json(&out.join("summary.json"));
    let lambda = s["lambda"].as_f64().unwrap();
    assert!(lambda > 0.0 && lambda < 1.0, "{lambda}");
    assert!(s["matching_residual"].as_f64().unwrap() < 1e-8);
    let mut r = csv::Reader::from_path(out.join("decomposition.csv")).unwrap();
    for rec in r.records() {
        let v: Vec<f64> = rec.unwrap().iter().map(|x| x.parse().unwrap()).collect();
        assert!((v[2] - v[3] - v[4]).abs() < 1e-12);
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    let cfg = format!("eps_list = [0.2, 0.1, 0.05]\n{SMALL}{FOURIER}");
    let mut reports = Vec::new();
    for w in ["1", "8"] {
        let out = tmp.path().join(format!("w{w}"));
        let o = kinlab(tmp.path(), &["converge", "--workers", w, "--out", out.to_str().unwrap()], &cfg, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push(std::fs::read(out.join("report.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}
