use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn nvnoise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvnoise"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path) -> Vec<PathBuf> {
    let out = nvnoise(&["synth", "--seed", "3", "--out", p(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    ["nv2", "nv3", "nv4", "nv20"].iter().map(|id| dir.join(format!("{id}.json"))).collect()
}

#[test]
fn synth_then_report_writes_json_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"));
    let out_dir = dir.path().join("out");
    let mut args = vec!["report", "--out", p(&out_dir)];
    args.extend(data.iter().map(|d| p(d)));
    let out = nvnoise(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["schema_version"], "1");
    assert_eq!(report["partial_failure"], false);
    assert_eq!(report["datasets"].as_array().unwrap().len(), 4);
    assert!(report["ensemble"]["global_fit"]["tau_c1_us"].as_f64().unwrap() > 1.0);
    for stem in ["t2_vs_n", "delta_vs_depth", "spectrum_nv2"] {
        assert!(out_dir.join("plots").join(format!("{stem}.svg")).exists(), "{stem}");
        assert!(out_dir.join("plots").join(format!("{stem}.csv")).exists(), "{stem}");
    }
}

#[test]
fn subcommands_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"));
    let out_dir = dir.path().join("out");

    let out = nvnoise(&["fit-decay", p(&data[1])]);
    assert!(out.status.success());
    let fits: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(fits.as_array().unwrap().iter().all(|f| f["status"] == "ok"));

    for d in &data {
        let out = nvnoise(&["spectrum", p(d), "--out", p(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let spectrum = out_dir.join("spectrum_nv3.json");
    let out = nvnoise(&["fit-spectrum", p(&spectrum)]);
    assert!(out.status.success());
    let fits: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(fits.as_array().unwrap().len(), 3);

    let args: Vec<String> = ["nv2", "nv3", "nv4", "nv20"]
        .iter()
        .map(|id| format!("{id}={}", out_dir.join(format!("spectrum_{id}.json")).display()))
        .collect();
    let mut cmd = vec!["global-fit"];
    cmd.extend(args.iter().map(String::as_str));
    let out = nvnoise(&cmd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let g: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(g["tau_c1_us"].as_f64().unwrap() > g["tau_c2_us"].as_f64().unwrap());

    let out = nvnoise(&["spectrum", "--nmr", p(&data[0]), "--out", p(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = nvnoise(&["depth", p(&out_dir.join("nmr_spectrum_nv2.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let depth: Value = serde_json::from_slice(&out.stdout).unwrap();
    let d = depth["depth"]["depth_nm"].as_f64().unwrap();
    assert!((d - 2.0).abs() < 1.0, "{d}");

    let points = dir.path().join("points.json");
    std::fs::write(
        &points,
        serde_json::json!([
            {"depth_nm": 2.0, "depth_err_nm": 0.1, "delta_mhz": 0.5, "delta_err_mhz": 0.02},
            {"depth_nm": 4.0, "depth_err_nm": 0.1, "delta_mhz": 0.25, "delta_err_mhz": 0.01},
            {"depth_nm": 8.0, "depth_err_nm": 0.2, "delta_mhz": 0.125, "delta_err_mhz": 0.005}
        ])
        .to_string(),
    )
    .unwrap();
    let out = nvnoise(&["depth-scaling", p(&points)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((fit["n"].as_f64().unwrap() - 1.0).abs() < 1e-3);
}

#[test]
fn exit_codes_distinguish_partial_and_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());

    // A dataset with a single pulse count cannot be decomposed.
    let mut d = json(&data[1]);
    d["curves"].as_array_mut().unwrap().retain(|c| c["n_pulses"] == 1);
    let lone = dir.path().join("lone.json");
    std::fs::write(&lone, d.to_string()).unwrap();
    let out = nvnoise(&["report", p(&lone)]);
    assert_eq!(out.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["partial_failure"], true);

    let out = nvnoise(&["report", p(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let out = nvnoise(&["fit-spectrum", p(&data[0]), "--model", "quadruple"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_controls_synthesis() {
    let dir = tempfile::tempdir().unwrap();
    let a = nvnoise(&["synth", "--seed", "5"]);
    let b = nvnoise(&["synth", "--seed", "5"]);
    let c = nvnoise(&["synth", "--seed", "6"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    let config = dir.path().join("config.json");
    std::fs::write(&config, "{\"default_sigma\": \"high\"}").unwrap();
    let out = nvnoise(&["--config", p(&config), "synth"]);
    assert_eq!(out.status.code(), Some(1));
}
