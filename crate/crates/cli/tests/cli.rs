use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn frk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frk")).args(args).output().expect("run frk")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small deterministic generator so the fixtures need no RNG crate.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// `n` scattered readings of a smooth surface over `[0, side]²`.
fn write_points(path: &Path, n: usize, side: f64, seed: u64) {
    let mut rng = Lcg(seed);
    let mut text = String::from("x,y,z\n");
    for _ in 0..n {
        let x = side * rng.next();
        let y = side * rng.next();
        let z = 5.0 + (x / side * 3.0).sin() + (y / side * 2.0).cos() + 0.3 * (rng.next() - 0.5);
        text.push_str(&format!("{x},{y},{z}\n"));
    }
    fs::write(path, text).unwrap();
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().iter().map(str::to_string).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    (headers, rows)
}

/// Writes 155 readings on a 4000-unit square and a config gridding it into
/// 200-unit BAUs.
fn meuse_like(dir: &Path) -> PathBuf {
    write_points(&dir.join("obs.csv"), 155, 4000.0, 7);
    write_config(
        dir,
        r#"{"data": "obs.csv", "output": "out", "cellsize": [200, 200],
            "meas_error": {"mode": "given", "sigma2": 0.01}, "basis_options": {"nres": 2}}"#,
    )
}

#[test]
fn fit_reports_monotone_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = meuse_like(dir.path());
    ok(frk(&["fit", "--config", s(&cfg), "--n-em", "30"]));
    let report = read_json(&dir.path().join("out/fit_report.json"));
    let trace: Vec<f64> = report["loglik_trace"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(report["n_observations"], 155);
    assert_eq!(trace.len(), report["iterations"].as_u64().unwrap() as usize + 1);
    assert!(trace.len() >= 2);
    for w in trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "trace decreased: {trace:?}");
    }
    assert!(dir.path().join("out/model.json").exists());
    assert!(dir.path().join("out/model.bin").exists());
}

#[test]
fn huge_tolerance_converges_at_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = meuse_like(dir.path());
    ok(frk(&["fit", "--config", s(&cfg), "--tol", "1e9"]));
    let report = read_json(&dir.path().join("out/fit_report.json"));
    assert_eq!(report["iterations"], 1);
    assert_eq!(report["converged"], true);
}

#[test]
fn empty_data_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = meuse_like(dir.path());
    fs::write(dir.path().join("obs.csv"), "x,y,z\n").unwrap();
    let out = frk(&["fit", "--config", s(&cfg)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn config_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"data": "obs.csv", "n_emm": 3}"#);
    let out = frk(&["fit", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("n_emm"), "{}", stderr(&out));

    let cfg = meuse_like(dir.path());
    let out = frk(&["fit", "--config", s(&cfg), "--tol", "-1"]);
    assert_eq!(code(&out), 2);

    let dir = tempfile::tempdir().unwrap();
    write_points(&dir.path().join("obs.csv"), 20, 1.0, 1);
    let cfg = write_config(dir.path(), r#"{"data": "obs.csv", "response": "pm25", "cellsize": [0.1, 0.1]}"#);
    let out = frk(&["fit", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("pm25"));
}

#[test]
fn bad_value_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = meuse_like(dir.path());
    fs::write(dir.path().join("obs.csv"), "x,y,z\n1,2,3\n4,5,abc\n").unwrap();
    let out = frk(&["fit", "--config", s(&cfg)]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("obs.csv line 3"), "{}", stderr(&out));
}

#[test]
fn predict_at_bau_level_and_over_regions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_points(&d.join("obs.csv"), 120, 1800.0, 3);
    let cfg = write_config(
        d,
        r#"{"data": "obs.csv", "output": "out", "cellsize": [50, 50], "buffer": 0,
            "meas_error": {"mode": "given", "sigma2": 0.01}, "n_em": 20}"#,
    );
    ok(frk(&["fit", "--config", s(&cfg), "--k-type", "block_exponential"]));
    let manifest = read_json(&d.join("out/model.json"));
    let n = manifest["baus"]["n"].as_u64().unwrap() as usize;

    ok(frk(&["predict", "--config", s(&cfg)]));
    let (headers, bau) = read_rows(&d.join("out/predictions.csv"));
    assert_eq!(headers, ["region_id", "mu", "sd", "var", "x", "y"]);
    assert_eq!(bau.len(), n);
    for r in &bau {
        assert!(r[3] >= 0.0);
        assert!((r[2] * r[2] - r[3]).abs() <= 1e-12 * r[3].max(1.0));
    }
    let pgm = fs::read(d.join("out/mu.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    assert!(d.join("out/sd.pgm").exists());

    // 600 × 600 super-grid over the BAU extent.
    let (x0, y0) = (
        bau.iter().map(|r| r[4]).fold(f64::INFINITY, f64::min) - 25.0,
        bau.iter().map(|r| r[5]).fold(f64::INFINITY, f64::min) - 25.0,
    );
    let (x1, y1) = (
        bau.iter().map(|r| r[4]).fold(f64::NEG_INFINITY, f64::max) + 25.0,
        bau.iter().map(|r| r[5]).fold(f64::NEG_INFINITY, f64::max) + 25.0,
    );
    let mut regions = String::from("xmin,xmax,ymin,ymax\n");
    let mut cells = Vec::new();
    let mut y = y0;
    while y < y1 - 1e-9 {
        let mut x = x0;
        while x < x1 - 1e-9 {
            regions.push_str(&format!("{x},{},{y},{}\n", x + 600.0, y + 600.0));
            cells.push((x, y));
            x += 600.0;
        }
        y += 600.0;
    }
    fs::write(d.join("regions.csv"), regions).unwrap();
    let model = d.join("out/model.json");
    let regions_path = d.join("regions.csv");
    ok(frk(&["predict", "--config", s(&cfg), "--model", s(&model), "--regions", s(&regions_path), "--output", s(&d.join("agg"))]));
    let (headers, agg) = read_rows(&d.join("agg/predictions.csv"));
    assert_eq!(headers, ["region_id", "mu", "sd", "var"]);
    assert_eq!(agg.len(), cells.len());
    for (k, &(x, y)) in cells.iter().enumerate() {
        let inside: Vec<f64> =
            bau.iter().filter(|r| r[4] >= x && r[4] < x + 600.0 && r[5] >= y && r[5] < y + 600.0).map(|r| r[1]).collect();
        let mean = inside.iter().sum::<f64>() / inside.len() as f64;
        assert!((agg[k][1] - mean).abs() <= 1e-9 * mean.abs().max(1.0), "region {k}: {} vs {mean}", agg[k][1]);
        assert!(agg[k][3] >= 0.0);
    }
}

#[test]
fn region_outside_the_baus_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = meuse_like(d);
    ok(frk(&["fit", "--config", s(&cfg), "--n-em", "3"]));
    fs::write(d.join("regions.csv"), "xmin,xmax,ymin,ymax\n0,1000,0,1000\n1e6,1.1e6,0,1000\n").unwrap();
    let out = frk(&["predict", "--config", s(&cfg), "--regions", s(&d.join("regions.csv"))]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("region 1"), "{}", stderr(&out));

    fs::write(d.join("regions.csv"), "left,right\n0,1\n").unwrap();
    let out = frk(&["predict", "--config", s(&cfg), "--regions", s(&d.join("regions.csv"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn variant_flag_must_match_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = meuse_like(dir.path());
    ok(frk(&["fit", "--config", s(&cfg), "--n-em", "3"]));
    ok(frk(&["predict", "--config", s(&cfg), "--variant", "case2"]));
    let out = frk(&["predict", "--config", s(&cfg), "--variant", "case1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("case1"));
}

#[test]
fn unsupported_model_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = meuse_like(dir.path());
    ok(frk(&["fit", "--config", s(&cfg), "--n-em", "3"]));
    let path = dir.path().join("out/model.json");
    let mut manifest = read_json(&path);
    manifest["version"] = 99.into();
    fs::write(&path, manifest.to_string()).unwrap();
    let out = frk(&["predict", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("version 99"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = meuse_like(d);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = d.join(run);
        ok(frk(&["fit", "--config", s(&cfg), "--output", s(&out), "--seed", "11"]));
        ok(frk(&["predict", "--config", s(&cfg), "--output", s(&out)]));
        outputs.push(out);
    }
    for f in ["model.json", "model.bin", "fit_report.json", "predictions.csv", "mu.pgm"] {
        let a = fs::read(outputs[0].join(f)).unwrap();
        let b = fs::read(outputs[1].join(f)).unwrap();
        if f == "model.json" || f == "fit_report.json" {
            // Only the output path differs.
            let strip = |v: Vec<u8>, run: &str| String::from_utf8(v).unwrap().replace(&format!("/{run}/"), "/");
            assert_eq!(strip(a, "a"), strip(b, "b"), "{f}");
        } else {
            assert_eq!(a, b, "{f}");
        }
    }
}

#[test]
fn reloaded_model_predicts_identically_with_covariates_and_std() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut baus = String::from("x,y,fs,elev\n");
    for j in 0..12 {
        for i in 0..12 {
            let (x, y) = (i as f64 + 0.5, j as f64 + 0.5);
            baus.push_str(&format!("{x},{y},{},{}\n", 1.0 + 0.1 * (i % 3) as f64, (x * 0.3).sin() + y * 0.1));
        }
    }
    fs::write(d.join("baus.csv"), baus).unwrap();
    let mut rng = Lcg(5);
    let mut obs = String::from("xmin,xmax,ymin,ymax,value,std\n");
    for _ in 0..60 {
        let x = (rng.next() * 10.0).floor();
        let y = (rng.next() * 10.0).floor();
        obs.push_str(&format!("{x},{},{y},{},{},{}\n", x + 2.0, y + 2.0, rng.next() * 3.0, 0.1 + 0.2 * rng.next()));
    }
    fs::write(d.join("obs.csv"), obs).unwrap();
    let cfg = write_config(
        d,
        r#"{"data": "obs.csv", "baus": "baus.csv", "covariates": ["elev"], "response": "value",
            "output": "out", "basis_options": {"nres": 1, "coarsest": 4}, "n_em": 15,
            "meas_error": {"mode": "given"}}"#,
    );
    ok(frk(&["fit", "--config", s(&cfg), "--variant", "case1", "--average-in-bau", "false"]));
    let manifest = read_json(&d.join("out/model.json"));
    assert_eq!(manifest["config"]["variant"], "case1");
    assert_eq!(manifest["observations"]["support"], "rect");
    assert_eq!(manifest["baus"]["covariates"][0], "elev");
    ok(frk(&["predict", "--config", s(&cfg), "--variant", "case1"]));
    let first = fs::read(d.join("out/predictions.csv")).unwrap();
    ok(frk(&["predict", "--config", s(&cfg)]));
    assert_eq!(first, fs::read(d.join("out/predictions.csv")).unwrap());
    let (_, rows) = read_rows(&d.join("out/predictions.csv"));
    assert_eq!(rows.len(), 144);
}

#[test]
fn simulate_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        r#"{"output": "sim", "simulation": {"n": 20, "covariance": {"kind": "exponential", "sigma2": 1, "tau": 0.15},
            "m": 120, "snr": 1, "replications": 2, "seed": 4}}"#,
    );
    ok(frk(&["simulate", "--config", s(&cfg)]));
    let (_, baus) = read_rows(&d.join("sim/baus.csv"));
    assert_eq!(baus.len(), 400);
    let (headers, obs) = read_rows(&d.join("sim/replication_001/obs.csv"));
    assert_eq!(headers, ["x", "y", "z", "cell"]);
    assert_eq!(obs.len(), 120);
    let (_, field) = read_rows(&d.join("sim/replication_000/field.csv"));
    assert_eq!(field.len(), 400);
    let (_, pred) = read_rows(&d.join("sim/prediction_cells.csv"));
    assert!(!pred.is_empty());

    let fit_cfg = write_config(
        d,
        r#"{"data": "sim/replication_000/obs.csv", "baus": "sim/baus.csv", "output": "fit",
            "meas_error": {"mode": "given", "sigma2": 1}, "basis_options": {"nres": 1}, "n_em": 10}"#,
    );
    ok(frk(&["fit", "--config", s(&fit_cfg)]));
    ok(frk(&["predict", "--config", s(&fit_cfg)]));
    let (_, p) = read_rows(&d.join("fit/predictions.csv"));
    assert_eq!(p.len(), 400);
}

fn smoke_benchmark(dir: &Path, predictors: &str) -> PathBuf {
    write_config(
        dir,
        &format!(
            r#"{{"output": "bench", "n_em": 20,
                "simulation": {{"n": 20, "covariance": {{"kind": "exponential", "sigma2": 1, "tau": 0.15}},
                                "m": 100, "snr": 1, "replications": 2, "seed": 8}},
                "predictors": {predictors}}}"#
        ),
    )
}

#[derive(Debug, serde::Deserialize)]
struct ReportRow {
    replication: usize,
    predictor: String,
    side: String,
    class: String,
    metric: String,
    value: f64,
}

fn read_report(path: &Path) -> Vec<ReportRow> {
    csv::Reader::from_path(path).unwrap().deserialize().map(|r| r.unwrap()).collect()
}

#[test]
fn benchmark_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = smoke_benchmark(d, r#"[{"kind": "exact"}, {"kind": "frk", "basis": {"nres": 1}}]"#);
    ok(frk(&["benchmark", "--config", s(&cfg)]));
    let rows = read_report(&d.join("bench/report.csv"));
    for l in 0..2 {
        let classes: std::collections::BTreeSet<(&str, &str)> = rows
            .iter()
            .filter(|r| r.replication == l && r.predictor == "frk" && r.metric == "rmspe" && r.side != "all")
            .map(|r| (r.side.as_str(), r.class.as_str()))
            .collect();
        assert_eq!(classes.len(), 4, "{classes:?}");
    }
    let rs: Vec<&ReportRow> = rows.iter().filter(|r| r.predictor == "exact" && r.metric == "rs").collect();
    assert!(!rs.is_empty());
    assert!(rs.iter().all(|r| r.value == 1.0));
    let summary = read_json(&d.join("bench/summary.json"));
    assert_eq!(summary["seed"], 8);
    assert_eq!(summary["predictors"], serde_json::json!(["exact", "frk"]));
    assert!(!summary["summary"].as_array().unwrap().is_empty());
}

#[test]
fn benchmark_scores_external_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut text = String::from("replication,cell,mu,sd\n");
    for l in 0..2 {
        for k in 0..400 {
            text.push_str(&format!("{l},{k},0,1\n"));
        }
    }
    fs::write(d.join("ext.csv"), text).unwrap();
    let cfg = smoke_benchmark(d, r#"[{"kind": "exact"}, {"kind": "external", "name": "prior", "path": "ext.csv"}]"#);
    ok(frk(&["benchmark", "--config", s(&cfg)]));
    let rows = read_report(&d.join("bench/report.csv"));
    let rs: Vec<f64> = rows
        .iter()
        .filter(|r| r.predictor == "prior" && r.metric == "rs" && r.side == "all")
        .map(|r| r.value)
        .collect();
    assert_eq!(rs.len(), 2);
    assert!(rs.iter().all(|&v| v > 1.0), "{rs:?}");

    fs::write(d.join("ext.csv"), "replication,cell,mu,sd\n0,0,1,1\n").unwrap();
    let out = frk(&["benchmark", "--config", s(&cfg)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn benchmark_nonstationary_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        r#"{"output": "bench",
            "simulation": {"n": 40, "covariance": {"kind": "nonstationary_mix", "sigma1": 0.5, "tau1": 0.15,
                           "sigma2": 0.5, "tau2": 0.15}, "m": 600, "snr": 1, "replications": 2, "seed": 21},
            "predictors": [{"kind": "frk"}]}"#,
    );
    ok(frk(&["benchmark", "--config", s(&cfg)]));
    let summary = read_json(&d.join("bench/summary.json"));
    let i90 = summary["summary"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["predictor"] == "frk" && r["side"] == "all" && r["class"] == "all" && r["metric"] == "i90")
        .unwrap()["mean"]
        .as_f64()
        .unwrap();
    assert!((0.75..=0.98).contains(&i90), "coverage {i90}");
}
