use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn qlink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qlink"))
        .args(args)
        .env_remove("QLINK_CONFIG_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Weak entangled source with quiet detectors, so the streams stay small.
const SMALL_BELL: &str = r#"
name = "small_bell"
seed = 7

[station]
background_cps = 20.0

[constraints]
apply_window_incidence = true

[source]
kind = "eps"
pair_rate_pps = 4.0e5
coupling_efficiency = 0.5
visibility = 0.95

[detectors]
dark_cps = 5.0

[clock]
offset_s = 0.2503
drift = 2.0e-8
"#;

fn write_scenario(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(format!("{name}.toml"));
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn results_of(json: &str) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    v["results"].clone()
}

#[test]
fn linkbudget_csv() {
    let o = qlink(&["linkbudget"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().ends_with("snr_bg100,snr_bg1000,snr_bg10000"));
    let mut saw_20cm = false;
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(f[6] > f[7] && f[7] > f[8], "{line}");
        if (f[0] - 0.20).abs() < 1e-9 {
            assert!((39.0..=41.0).contains(&f[1]));
            saw_20cm = true;
        }
    }
    assert!(saw_20cm);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&qlink(&["linkbudget", "--dt-sweep", "0.1:0.4:0"])), 2);
    assert_eq!(code(&qlink(&["linkbudget", "--dt-sweep", "0.1:0.4:-0.1"])), 2);
    assert_eq!(code(&qlink(&["linkbudget", "--dt-sweep", "0.1,0.4"])), 2);
    assert_eq!(code(&qlink(&["simulate", "--scenario", "no_such_scenario", "--out", "/tmp/x"])), 2);
    assert_eq!(code(&qlink(&["frobnicate"])), 2);
}

#[test]
fn fig5_grid() {
    let o = qlink(&["feasibility", "--fig5"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 41 * 3);
    let at = |a: f64, b: f64| rows.iter().find(|r| r[0] == a && r[1] == b).unwrap().clone();
    assert!((10.0..=20.0).contains(&at(40.0, 1000.0)[2]));
    assert!((3.5..=6.5).contains(&at(40.0, 10000.0)[2]));
    assert_eq!(at(55.0, 10000.0)[6], 0.0);
}

#[test]
fn empty_window_exits_3() {
    let dir = TempDir::new().unwrap();
    let body = format!("{SMALL_BELL}\n[pass]\nmax_elevation_deg = 35.0\n");
    let scn = write_scenario(dir.path(), "low", &body);
    let o = qlink(&["simulate", "--scenario", &scn, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unwritable_output_exits_4() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = qlink(&["simulate", "--scenario", "iss_qkd_default", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn bell_simulate_is_deterministic_and_analyze_reproduces_it() {
    let dir = TempDir::new().unwrap();
    let scn = write_scenario(dir.path(), "small_bell", SMALL_BELL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = qlink(&["simulate", "--scenario", &scn, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["ground.qtt", "space.qtt", "coincidences.csv", "report.json", "report.txt", "pass.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let report = fs::read_to_string(a.join("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["seed"], 7);
    assert_eq!(v["scenario"]["source"]["pair_rate_pps"], 4.0e5);

    let analyzed = dir.path().join("analyzed.json");
    let o = qlink(&[
        "analyze",
        "--ground",
        a.join("ground.qtt").to_str().unwrap(),
        "--space",
        a.join("space.qtt").to_str().unwrap(),
        "--scenario",
        &scn,
        "--out",
        analyzed.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(results_of(&fs::read_to_string(&analyzed).unwrap()), results_of(&report));

    let o = qlink(&["report", a.join("report.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("CHSH"));

    // a different seed gives streams unrelated to these
    let c = dir.path().join("c");
    assert_eq!(code(&qlink(&["simulate", "--scenario", &scn, "--out", c.to_str().unwrap(), "--seed", "8"])), 0);
    let o = qlink(&[
        "analyze",
        "--ground",
        a.join("ground.qtt").to_str().unwrap(),
        "--space",
        c.join("space.qtt").to_str().unwrap(),
        "--scenario",
        &scn,
    ]);
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unsorted_file_exits_5() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("q");
    assert_eq!(code(&qlink(&["simulate", "--scenario", "iss_qkd_default", "--out", out.to_str().unwrap()])), 0);
    let mut bytes = fs::read(out.join("space.qtt")).unwrap();
    // swap records 10 and 20
    let (h, r) = (16, 9);
    for k in 0..r {
        bytes.swap(h + 10 * r + k, h + 20 * r + k);
    }
    let bad = dir.path().join("shuffled.qtt");
    fs::write(&bad, &bytes).unwrap();
    let o = qlink(&["analyze", "--space", bad.to_str().unwrap(), "--scenario", "iss_qkd_default"]);
    assert_eq!(code(&o), 5);
    let msg = String::from_utf8(o.stderr).unwrap();
    assert!(msg.contains("byte") && msg.contains("sorted"), "{msg}");

    let o = qlink(&["analyze", "--space", out.join("report.json").to_str().unwrap(), "--scenario", "iss_qkd_default"]);
    assert_eq!(code(&o), 5);
}

#[test]
fn qkd_analyze_matches_simulate() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("q");
    let o = qlink(&["simulate", "--scenario", "iss_qkd_default", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("key rate"));
    for f in ["space.qtt", "pulses.csv", "sifted_key.csv", "report.json", "performance.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let analyzed = dir.path().join("a.json");
    let o = qlink(&[
        "analyze",
        "--space",
        out.join("space.qtt").to_str().unwrap(),
        "--scenario",
        "iss_qkd_default",
        "--out",
        analyzed.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        results_of(&fs::read_to_string(analyzed).unwrap()),
        results_of(&fs::read_to_string(out.join("report.json")).unwrap())
    );
}

#[test]
fn config_dir_env_is_searched() {
    let dir = TempDir::new().unwrap();
    write_scenario(dir.path(), "mine", &SMALL_BELL.replace("small_bell", "mine"));
    let o = Command::new(env!("CARGO_BIN_EXE_qlink"))
        .args(["pass", "--scenario", "mine"])
        .env("QLINK_CONFIG_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("t_s,elevation_deg"));
}
