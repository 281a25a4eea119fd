//! Scenario-level round trips on a small entangled-source pass.

use qlink::scenario::{PassReport, Results, Scenario, Streams};
use qlink::timetag::TimeTagStream;

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

#[test]
fn report_is_reproducible_and_round_trips() {
    let scn = Scenario::from_toml_str(SMALL_BELL).unwrap();
    let a = scn.run().unwrap();
    let b = scn.run().unwrap();
    let json = a.report.to_json();
    assert_eq!(json, b.report.to_json());

    let back = PassReport::from_json(&json).unwrap();
    assert_eq!(back, a.report);
    assert!(back.render_text().contains("small_bell"));

    let Results::Bell(r) = &a.report.results else { panic!("expected a Bell report") };
    assert!(r.matched > 100);
    let truth = 0.2503 + 2.0e-8 * r.clock.ref_time_s;
    assert!((r.clock.offset_s - truth).abs() < 1e-9);
}

#[test]
fn analysis_from_files_matches_the_run() {
    let scn = Scenario::from_toml_str(SMALL_BELL).unwrap();
    let run = scn.run().unwrap();
    let Streams::Eps { ground, space, .. } = &run.simulation.streams else { panic!("expected EPS streams") };
    let g = TimeTagStream::from_bytes(&ground.to_bytes()).unwrap();
    let s = TimeTagStream::from_bytes(&space.to_bytes()).unwrap();
    let prepared = scn.prepare().unwrap();
    let (results, _) = scn.analyze_eps(&prepared, &g, &s, scn.noise.coincidence_window_s).unwrap();
    let Results::Bell(r) = &run.report.results else { panic!("expected a Bell report") };
    assert_eq!(&results, r);
}

#[test]
fn seed_changes_the_streams() {
    let mut scn = Scenario::from_toml_str(SMALL_BELL).unwrap();
    let a = scn.simulate().unwrap();
    scn.seed += 1;
    let b = scn.simulate().unwrap();
    let (Streams::Eps { space: sa, .. }, Streams::Eps { space: sb, .. }) = (&a.streams, &b.streams) else {
        panic!("expected EPS streams")
    };
    assert_ne!(sa, sb);
}

#[test]
fn config_errors_are_reported() {
    assert!(Scenario::from_toml_str(&format!("{SMALL_BELL}\nbogus = 1\n")).is_err());
    let typo = SMALL_BELL.replace("dark_cps", "dark_cpss");
    assert!(Scenario::from_toml_str(&typo).is_err());

    let scn = Scenario::from_toml_str(SMALL_BELL).unwrap();
    let json = scn.run().unwrap().report.to_json().replace("\"schema_version\": 1", "\"schema_version\": 99");
    assert!(PassReport::from_json(&json).is_err());
}
