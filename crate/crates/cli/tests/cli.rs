use std::path::Path;
use std::process::{Command, Output};

fn timeseed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timeseed"))
        .args(args)
        .env_remove("TIMESEED_DENSE_CAP")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn single_ensemble_run_has_four_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "one.json",
        r#"{"params": {"ensembles": [{"omega": 1.5, "kappa": 1.0}]}, "integration": {"t_end": 1.0, "dt_out": 0.5}}"#,
    );
    let o = timeseed(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,mx_0,my_0,mz_0");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1], "0.00000000000e0,0.00000000000e0,0.00000000000e0,1.00000000000e0");
}

#[test]
fn preset_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let o = timeseed(&["simulate", "--preset", "fig1", "--t-end", "5", "--out", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert_eq!(a, b);
    let head = String::from_utf8(a).unwrap();
    assert!(head.starts_with("t,mx_0,my_0,mz_0,mx_1,my_1,mz_1\n"));
}

#[test]
fn every_preset_loads() {
    for p in ["fig1", "fig1f", "fig2", "fig3a", "fig3e", "appD"] {
        let o = timeseed(&["simulate", "--preset", p, "--t-end", "0.1"]);
        assert_eq!(o.status.code(), Some(0), "{p}: {}", stderr(&o));
    }
}

#[test]
fn malformed_json_names_the_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\"params\": {\"ensembles\": [1.5,");
    let o = timeseed(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("byte "), "{}", stderr(&o));
}

#[test]
fn invalid_fields_are_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "neg.json",
        r#"{"params": {"ensembles": [{"omega": 1.5, "kappa": 1.0}, {"omega": 0.9, "kappa": -1.0}]}}"#,
    );
    let o = timeseed(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("params.ensembles[1].kappa"), "{}", stderr(&o));

    let o = timeseed(&["simulate", "--preset", "fig1", "--seed-override", "0,0,1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("initial"), "{}", stderr(&o));
}

#[test]
fn missing_source_is_a_config_error() {
    let o = timeseed(&["simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_size_fit_is_rejected() {
    let o = timeseed(&["spectrum", "--preset", "fig1f", "--sizes", "6", "--fit"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("underdetermined"), "{}", stderr(&o));
}

#[test]
fn spectrum_table_fit_and_cross_check() {
    let o = timeseed(&["spectrum", "--preset", "fig1", "--sizes", "4,6", "--fit", "--cross-check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("N,re_l1,im_l1,re_l2,im_l2"));
    let row6: Vec<&str> = lines.nth(1).unwrap().split(',').collect();
    assert_eq!(row6[0], "6");
    let re: f64 = row6[1].parse().unwrap();
    let im: f64 = row6[2].parse().unwrap();
    assert!((re + 0.752951).abs() < 1e-5 && (im - 1.141113).abs() < 1e-5, "{re} {im}");
    let json_start = text.find("# fit\n").unwrap() + 6;
    let fit: serde_json::Value = serde_json::from_str(&text[json_start..]).unwrap();
    assert_eq!(fit["im"]["mu"], 1);
    assert!(stderr(&o).contains("cross-check max"));
}

#[test]
fn dense_cap_comes_from_the_environment() {
    let run = |cap: &str| {
        Command::new(env!("CARGO_BIN_EXE_timeseed"))
            .args(["spectrum", "--preset", "fig1", "--sizes", "4"])
            .env("TIMESEED_DENSE_CAP", cap)
            .output()
            .unwrap()
    };
    assert_eq!(run("lots").status.code(), Some(2));
    let dense = run("100000");
    let iterative = run("0");
    assert_eq!(dense.status.code(), Some(0));
    assert_eq!(iterative.status.code(), Some(0), "{}", stderr(&iterative));
    let l1 = |o: &Output| -> (f64, f64) {
        let text = stdout(o);
        let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        (row[0], row[1])
    };
    let (a, b) = (l1(&dense), l1(&iterative));
    assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
}

#[test]
fn oversized_ladder_hits_the_resource_cap() {
    let o = timeseed(&["spectrum", "--preset", "fig1", "--sizes", "60"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn crit_reports_both_values_when_the_formula_applies() {
    let o = timeseed(&["crit", "--preset", "fig1", "--tol", "1e-3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(doc["analytic"], serde_json::json!(0.714285714286));
    assert!(doc["delta"].as_f64().unwrap() < 1e-3);
}

#[test]
fn crit_marks_the_formula_na_for_three_ensembles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "three.json",
        r#"{"params": {"ensembles": [{"omega": 1.5, "kappa": 1.0}, {"omega": 0.9, "kappa": 1.0}, {"omega": 0.9, "kappa": 1.0}],
            "coupling": {"kind": "dissipative", "strength": 0.1}},
            "crit": {"lo": 0.0, "hi": 2.0, "tol": 0.01}}"#,
    );
    let o = timeseed(&["crit", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(doc["analytic"], "n/a");
    assert_eq!(doc["delta"], "n/a");
    assert!(doc["bisection"].as_f64().unwrap() > 0.0);
}

#[test]
fn crit_with_a_bad_bracket_is_a_config_error() {
    let o = timeseed(&["crit", "--preset", "fig1", "--lo", "0.9", "--hi", "1.0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn sweep_writes_a_resumable_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "grid.json",
        r#"{"params": {"ensembles": [{"omega": 1.15, "kappa": 1.0}, {"omega": 1.15, "kappa": 1.0}]},
            "integration": {"t_end": 60.0, "dt_out": 0.1},
            "sweep": {"axis1": {"name": "detuning", "start": 0.05, "stop": 0.3, "count": 2},
                      "axis2": {"name": "coupling", "start": 0.02, "stop": 0.2, "count": 2},
                      "metric": "delta_obs"}}"#,
    );
    let out = dir.path().join("grid.tsg");
    let out_s = out.to_str().unwrap();
    let o = timeseed(&["sweep", "--config", &cfg, "--out", out_s, "--checkpoints", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[1], "axis1,axis2,value");
    assert!(lines[0].contains("\"mask\":[true,true,true,true]"));
    assert!(!first.contains("NaN"));

    let o = timeseed(&["sweep", "--resume", out_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), first);
}
