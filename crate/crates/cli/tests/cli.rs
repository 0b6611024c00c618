use std::path::Path;
use std::process::{Command, Output};

fn hsdm(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsdm"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) {
    let out = hsdm(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn simulate(cwd: &Path, days: &str, events: &str) {
    ok(cwd, &["simulate", "--seed", "7", "--days", days, "--events", events, "--out", "sim"]);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hsdm(dir.path(), &["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = hsdm(dir.path(), &["compare", "--input", "x.csv", "--model", "garch", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = hsdm(dir.path(), &["fit", "--input", "missing.csv", "--out", "b"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn simulate_fit_predict_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "2", "900");
    for f in ["events.csv", "truth.csv", "scenario.toml", "manifest.json"] {
        assert!(d.join("sim").join(f).exists(), "{f}");
    }
    ok(d, &["fit", "--input", "sim/events.csv", "--model", "hsdm", "--seed", "3", "--out", "bundle"]);
    assert!(d.join("bundle/manifest.json").exists());
    ok(d, &["predict", "--bundle", "bundle", "--input", "sim/events.csv", "--seed", "3", "--trend-update", "pm", "--out", "pred"]);
    ok(d, &["diagnose", "--predictions", "pred/predictions.csv", "--out", "diag"]);

    let mut rdr = csv::Reader::from_path(d.join("diag/report.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    assert_eq!(&rows[0][col("model")], "HSDM");
    assert_eq!(&rows[0][col("date")], "day-002");
    let p: f64 = rows[0][col("ks_p")].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("pred/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["decisions"]["test_day"], "day-002");
    assert!(manifest["decisions"]["kde_bandwidth_response"].is_string());
}

#[test]
fn benchmark_bundles_work_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "2", "700");
    ok(d, &["fit", "--input", "sim/events.csv", "--model", "sfiacd", "--out", "b"]);
    ok(d, &["predict", "--bundle", "b", "--input", "sim/events.csv", "--day", "day-002", "--out", "p"]);
    let text = std::fs::read_to_string(d.join("p/predictions.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("sFIACD,day-002,0,"));
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn compare_is_deterministic_and_tabulates_pairs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        simulate(d, "3", "700");
        ok(d, &["compare", "--input", "sim/events.csv", "--seed", "11", "--threads", "2", "--out", "cmp"]);
    }
    let fa = read_all(&a.path().join("cmp"));
    let fb = read_all(&b.path().join("cmp"));
    assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for (x, y) in fa.iter().zip(&fb) {
        assert!(x.1 == y.1, "{} differs between runs", x.0);
    }
    assert_eq!(read_all(&a.path().join("sim")), read_all(&b.path().join("sim")));
    let table = std::fs::read_to_string(a.path().join("cmp/comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "date,neg_pll_HSDM,neg_pll_eACD,neg_pll_sACD,neg_pll_eFIACD,neg_pll_sFIACD");
    assert_eq!(lines.len(), 3);
    let manifest = std::fs::read_to_string(a.path().join("cmp/manifest.json")).unwrap();
    assert!(manifest.contains("\"lambda\""));
    assert!(manifest.contains("arfima_order"));
}

#[test]
fn smoothing_study_writes_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "2", "700");
    ok(d, &["smoothing-study", "--input", "sim/events.csv", "--replicates", "2", "--out", "s"]);
    let text = std::fs::read_to_string(d.join("s/smoothing.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "train_date,test_date,model,pll_0,pll_1,ratio");
    assert_eq!(lines.len(), 3);
}
