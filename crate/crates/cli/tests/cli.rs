use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn onesided(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_onesided"))
        .args(args)
        .env_remove("ONESIDED_MC_THREADS")
        .output()
        .expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn generate(dir: &Path, seed: &str) {
    let out = onesided(&[
        "generate", "--kind", "common-means", "--n", "400", "--d", "30", "--r", "3", "--scheme", "fixed-c", "--c", "6",
        "--seed", seed, "--out-dir", dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, "7");
    generate(&b, "7");
    for f in ["mask.coo", "m.bin", "t.bin", "factors.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = tmp.path().join("c");
    generate(&c, "8");
    assert_ne!(std::fs::read(a.join("mask.coo")).unwrap(), std::fs::read(c.join("mask.coo")).unwrap());
}

#[test]
fn missing_dimension_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = onesided(&["generate", "--n", "100", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--d"));
    assert_eq!(onesided(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.coo");
    std::fs::write(&bad, "0 0 1.0\n0 0 2.0\n").unwrap();
    let out = onesided(&["estimate", "--input", bad.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    generate(&gen, "1");
    let out = onesided(&[
        "complete", "--input", gen.join("mask.coo").to_str().unwrap(), "--rank", "3", "--learning-rate", "1e6",
        "--out-dir", tmp.path().join("c").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn estimate_compare_reports_lower_hajek_bias() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    let out = onesided(&[
        "generate", "--n", "2000", "--d", "100", "--r", "5", "--scheme", "uniform", "--p", "0.03", "--seed", "3",
        "--out-dir", gen.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let est = tmp.path().join("est");
    let out = onesided(&[
        "estimate", "--input", gen.join("mask.coo").to_str().unwrap(), "--truth", gen.join("t.bin").to_str().unwrap(),
        "--p", "0.03", "--compare", "--out-dir", est.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&est);
    assert!(r["metrics"]["bias_hajek"].as_f64().unwrap() < r["metrics"]["bias_ht"].as_f64().unwrap());
    let csv = std::fs::read_to_string(est.join("bias.csv")).unwrap();
    assert!(csv.starts_with("experiment,config,seed,metric,value\n"));
    assert!(est.join("t_hat.est").exists());
}

#[test]
fn complete_impute_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    generate(&gen, "2");
    let mask = gen.join("mask.coo");
    let cmp = tmp.path().join("cmp");
    let out = onesided(&[
        "complete", "--input", mask.to_str().unwrap(), "--rank", "3", "--iterations", "300", "--truth",
        gen.join("t.bin").to_str().unwrap(), "--out-dir", cmp.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let reported = report(&cmp)["metrics"]["one_sided_error"].as_f64().unwrap();

    let ev = tmp.path().join("ev");
    let out = onesided(&[
        "evaluate", "--estimate", cmp.join("t.bin").to_str().unwrap(), "--truth", gen.join("t.bin").to_str().unwrap(),
        "--out-dir", ev.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let r = report(&ev);
    assert_eq!(r["metrics"]["one_sided_error"].as_f64().unwrap(), reported);
    assert!(r["metrics"].get("rmse").is_none());

    let imp = tmp.path().join("imp");
    let out = onesided(&[
        "impute", "--input", mask.to_str().unwrap(), "--rank", "3", "--iterations", "300", "--holdout-fraction", "0.2",
        "--out-dir", imp.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rmse = report(&imp)["metrics"]["rmse"].as_f64().unwrap();
    let ev2 = tmp.path().join("ev2");
    let out = onesided(&[
        "evaluate", "--imputed", imp.join("imputed.bin").to_str().unwrap(), "--holdout",
        imp.join("holdout.coo").to_str().unwrap(), "--out-dir", ev2.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!((report(&ev2)["metrics"]["rmse"].as_f64().unwrap() - rmse).abs() < 1e-12);
}

#[test]
fn baseline_methods_run() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    generate(&gen, "4");
    for method in ["alt-gd", "softimpute-als", "nuclear-gd"] {
        let dir = tmp.path().join(method);
        let out = onesided(&[
            "complete", "--input", gen.join("mask.coo").to_str().unwrap(), "--rank", "3", "--method", method,
            "--iterations", "50", "--out-dir", dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{method}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.join("t.bin").exists());
    }
}

#[test]
fn sweep_csv_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = onesided(&[
            "sweep", "--experiment", "dims", "--d", "30,40", "--seeds", "2", "--iterations", "100", "--threads", "2",
            "--out-dir", dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.join("results.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 4);
}

#[test]
fn config_file_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "seed = 11\n[generate]\nn = 50\nd = 10\nr = 2\nc = 3\n").unwrap();
    let dir = tmp.path().join("g");
    let out = onesided(&[
        "--config", cfg.to_str().unwrap(), "generate", "--d", "12", "--out-dir", dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir);
    assert_eq!(r["seed"], 11);
    assert_eq!(r["config"]["model"]["n"], 50);
    assert_eq!(r["config"]["model"]["d"], 12);

    std::fs::write(&cfg, "[generate]\nbogus = 1\n").unwrap();
    let out = onesided(&["--config", cfg.to_str().unwrap(), "generate", "--n", "5", "--d", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sensitivity_reports_caveat() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    generate(&gen, "5");
    let dir = tmp.path().join("s");
    let out = onesided(&[
        "sensitivity", "--input", gen.join("mask.coo").to_str().unwrap(), "--rank", "3", "--trials", "3", "--sigmas",
        "0,0.01,0.02", "--epsilon", "1", "--iterations", "100", "--out-dir", dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir);
    assert!(r["metrics"]["max_gap"].as_f64().unwrap() >= 0.0);
    assert!(r["metrics"]["dp_sigma"].as_f64().is_some());
    assert!(r["notes"][0].as_str().unwrap().contains("not a worst-case bound"));
}
