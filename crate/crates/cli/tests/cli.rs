use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmsm_core::analysis::{AnalysisReport, Method};

fn cmsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmsm")).args(args).env_remove("CMSM_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = cmsm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

fn simulated(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let p = dir.join(format!("sim_{n}_{seed}.csv"));
    ok(&["simulate", "--out", s(&p), "--n", &n.to_string(), "--seed", &seed.to_string()]);
    p
}

fn report(p: &Path) -> AnalysisReport {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const FAST: &[&str] = &["--backend", "linear", "--tau-count", "3", "-b", "20", "--seed", "5", "--omit-timings"];

fn sensitivity(input: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["sensitivity", "--input", s(input), "--out", s(out)];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    cmsm(&args)
}

#[test]
fn simulate_trims_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulated(dir.path(), 1000, 3);
    assert_eq!(lines(&a), 901);
    let b = dir.path().join("again.csv");
    ok(&["simulate", "--out", s(&b), "--n", "1000", "--seed", "3"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let raw = dir.path().join("raw.csv");
    let latent = dir.path().join("u.csv");
    ok(&["simulate", "--out", s(&raw), "--n", "1000", "--seed", "3", "--no-trim", "--latent", s(&latent)]);
    assert_eq!(lines(&raw), 1001);
    assert_eq!(lines(&latent), 1001);
    assert!(std::fs::read_to_string(&raw).unwrap().starts_with("x1,x2,x3,x4,x5,t,y\n"));

    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.with_extension("json")).unwrap()).unwrap();
    assert_eq!(side["n_rows"], 900);
    assert_eq!(side["kept_rows"].as_array().unwrap().len(), 900);
    assert_eq!(side["truth"].as_array().unwrap().len(), 15);
}

#[test]
fn seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let st =
        Command::new(env!("CARGO_BIN_EXE_cmsm")).args(["simulate", "--out", s(&a), "--n", "200"]).env("CMSM_SEED", "11").status().unwrap();
    assert!(st.success());
    ok(&["simulate", "--out", s(&b), "--n", "200", "--seed", "11"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn preprocess_trims_to_paper_sample_size() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    ok(&["simulate", "--out", s(&raw), "--n", "2132", "--seed", "1", "--no-trim"]);
    let out = dir.path().join("clean.csv");
    ok(&["preprocess", "--input", s(&raw), "--out", s(&out), "--trim-fraction", "0.1"]);
    assert_eq!(lines(&out), 1919);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("affine.json")).unwrap()).unwrap();
    assert_eq!((side["n_in"].as_u64(), side["n_out"].as_u64()), (Some(2132), Some(1918)));
    assert_eq!(side["columns"].as_array().unwrap().len(), 7);
}

#[test]
fn preprocess_standardizes_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("in.csv");
    std::fs::write(&p, "x1,t,y\n1,2,3\n2,4,5\n4,6,7\n8,8,11\n").unwrap();
    let out = dir.path().join("out.csv");
    ok(&["preprocess", "--input", s(&p), "--out", s(&out), "--log", "x1"]);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("affine.json")).unwrap()).unwrap();
    let x1 = &side["columns"][0];
    assert_eq!(x1["log"], true);
    let mean_log = (1f64.ln() + 2f64.ln() + 4f64.ln() + 8f64.ln()) / 4.0;
    assert!((x1["mean"].as_f64().unwrap() - mean_log).abs() < 1e-12);
    let body = std::fs::read_to_string(&out).unwrap();
    let col: Vec<f64> = body.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(col.iter().sum::<f64>().abs() < 1e-12);
}

#[test]
fn log_guard_lists_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("in.csv");
    std::fs::write(&p, "x1,t,y\n1,2,3\n0,4,5\n4,6,7\n-1,8,11\n").unwrap();
    let out = cmsm(&["preprocess", "--input", s(&p), "--out", s(&dir.path().join("o.csv")), "--log", "x1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rows 2, 4"), "{err}");
}

#[test]
fn sensitivity_is_byte_identical_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated(dir.path(), 500, 2);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    assert!(sensitivity(&data, &a, &["--gamma", "1,2", "--baseline", "--mc-samples", "100"]).status.success());
    let two = ok(&[
        "--workers",
        "2",
        "sensitivity",
        "--input",
        s(&data),
        "--out",
        s(&b),
        "--gamma",
        "1,2",
        "--baseline",
        "--mc-samples",
        "100",
        "--backend",
        "linear",
        "--tau-count",
        "3",
        "-b",
        "20",
        "--seed",
        "5",
        "--omit-timings",
    ]);
    assert!(two.status.success());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());

    let r = report(&a);
    assert_eq!(r.records.len(), 3 * 2 * 2);
    let again: AnalysisReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(again, r);
    assert_eq!(serde_json::to_string_pretty(&r).unwrap() + "\n", text);
}

#[test]
fn output_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated(dir.path(), 400, 4);
    let out = dir.path().join("r.json");
    assert!(sensitivity(&data, &out, &["--gamma", "1,3", "--baseline", "--mc-samples", "50", "--doubly-robust"]).status.success());
    let schema: serde_json::Value = serde_json::from_str(include_str!("../schema/results.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    let mut broken = value.clone();
    broken["records"][0]["gamma"] = serde_json::json!(0.5);
    assert!(!validator.is_valid(&broken));
}

#[test]
fn gamma_one_collapses() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated(dir.path(), 400, 6);
    let out = dir.path().join("r.json");
    assert!(sensitivity(&data, &out, &["--gamma", "1"]).status.success());
    for r in report(&out).records {
        assert_eq!(r.pei_lo.to_bits(), r.pei_hi.to_bits());
        assert_eq!(r.pei_lo.to_bits(), r.point.to_bits());
    }
}

#[test]
fn intervals_widen_with_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated(dir.path(), 600, 8);
    let out = dir.path().join("r.json");
    assert!(sensitivity(&data, &out, &["--gamma", "1.01,2,3"]).status.success());
    let recs = report(&out).records;
    for cell in recs.chunks(3) {
        let w: Vec<f64> = cell.iter().map(|r| r.ci_hi - r.ci_lo).collect();
        assert!(w[0] <= w[1] && w[1] <= w[2], "{w:?}");
        let p: Vec<f64> = cell.iter().map(|r| r.pei_hi - r.pei_lo).collect();
        assert!(p[0] <= p[1] && p[1] <= p[2], "{p:?}");
    }
}

#[test]
fn config_file_supplies_flags_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated(dir.path(), 300, 9);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("input = {:?}\ngamma = [1.0, 2.0]\nbootstrap = 10\nbackend = \"linear\"\ntau-count = 2\nbaseline = true\nmc-samples = 30\nomit-timings = true\n", s(&data))).unwrap();
    let out = dir.path().join("r.json");
    ok(&["sensitivity", "--config", s(&cfg), "--out", s(&out), "--gamma", "3"]);
    let r = report(&out);
    assert_eq!(r.records.len(), 2 * 2);
    assert!(r.records.iter().all(|x| x.gamma == 3.0 && x.b == 10));
    assert!(r.records.iter().any(|x| x.method == Method::Baseline));

    std::fs::write(&cfg, "bogus-key = 1\n").unwrap();
    assert_eq!(cmsm(&["sensitivity", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn oracle_backend_reads_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated(dir.path(), 300, 12);
    let out = dir.path().join("r.json");
    let side = data.with_extension("json");
    assert!(sensitivity(&data, &out, &["--gamma", "2", "--backend", "oracle", "--oracle-config", s(&side)]).status.success());
    assert_eq!(report(&out).records.len(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated(dir.path(), 200, 1);
    let out = dir.path().join("r.json");

    let bad_gamma = sensitivity(&data, &out, &["--gamma", "0.5"]);
    assert_eq!(bad_gamma.status.code(), Some(2));

    let bad_csv = dir.path().join("bad.csv");
    std::fs::write(&bad_csv, "x1,t,y\n1,2,3\n4,5,6\n7,abc,9\n").unwrap();
    let o = sensitivity(&bad_csv, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 3"));

    let short = dir.path().join("short.csv");
    std::fs::write(&short, "x1,t,y\n1,2,3\n4,5\n").unwrap();
    let o = sensitivity(&short, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));

    let missing = sensitivity(&dir.path().join("nope.csv"), &out, &[]);
    assert_eq!(missing.status.code(), Some(4));

    let unwritable = cmsm(&["simulate", "--out", s(&dir.path().join("no/such/dir/a.csv")), "--n", "100"]);
    assert_eq!(unwritable.status.code(), Some(4));

    let one_fold = sensitivity(&data, &out, &["--folds", "1"]);
    assert_eq!(one_fold.status.code(), Some(2));
}

#[test]
fn calibrate_prints_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    let o = ok(&["calibrate-gamma", "--n-cal", "2000", "--out", s(&out)]);
    let g: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!(g > 1.0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["gamma"].as_f64(), Some(g));

    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, "beta_u = [0.0, 0.0, 0.0]\n").unwrap();
    let o = ok(&["calibrate-gamma", "--config", s(&cfg), "--n-cal", "2000", "--fixed-tau", "--tau-count", "3"]);
    let g: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!((g - 1.0).abs() < 1e-6);
}

#[test]
fn benchmark_reports_six_entries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.json");
    ok(&["benchmark", "--n", "300", "-b", "5", "--mc-samples", "50", "--out", s(&out)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let entries = v["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 6);
    for e in entries {
        let secs = e["seconds"].as_f64().unwrap();
        assert!(secs > 0.0);
        let total = e["phases"]["total"].as_f64().unwrap();
        let parts: f64 = ["fit", "bandwidth", "bounds", "refit", "bootstrap", "baseline_bounds", "baseline_bootstrap"]
            .iter()
            .map(|k| e["phases"][k].as_f64().unwrap())
            .sum();
        assert!(parts <= total * 1.05 && parts >= total * 0.95, "{parts} vs {total}");
    }
}
