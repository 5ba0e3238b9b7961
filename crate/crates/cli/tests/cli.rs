use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_survens");

const SMALL: &str = r#"
seed = 11
m_imputations = 2
mice_iterations = 3
cv_folds = 2

[selection]
n_lambda = 10

[rsf]
n_trees = 10

[deepsurv]
layer_widths = [4, 1]
epochs = 30
learning_rate = 0.01
dropout = 0.0

[gbcox]
n_rounds = 15

[synth]
n_subjects = 120
true_beta = [0.3, 0.5, 0.0, 0.0, 0.0, 0.0]
slope_beta = [0.8, 0.0, 0.0, 0.0]
missing_rate = 0.05
seed = 5
"#;

fn survens(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "error").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_on_every_subcommand() {
    assert!(survens(&["--help"]).status.success());
    for sub in ["generate", "impute", "select", "fit", "evaluate", "run", "report"] {
        let out = survens(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn unknown_key_is_a_validation_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\n[gbcox_extra]\nx = 1\n"));
    let out = survens(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gbcox_extra"));

    let cfg = write_config(dir.path(), SMALL);
    let out = survens(&["run", "--config", &cfg, "--set", "rsf.n_treez=4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_treez"));
}

#[test]
fn bad_values_and_usage_exit_one() {
    let out = survens(&["run", "--set", "cv_folds=1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = survens(&["run", "--scenario", "4visits"]);
    assert_eq!(out.status.code(), Some(1));
    let out = survens(&["fit", "--input", "/nonexistent.csv", "--model", "rsf", "--out", "/tmp/x.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn too_small_cohort_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = survens(&[
        "run",
        "--config",
        &cfg,
        "--set",
        "synth.n_subjects=4",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_is_byte_identical_and_has_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = survens(&["run", "--config", &cfg, "--jobs", "1", "--out-dir", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["report.csv", "table_cindex.csv", "table_iauc.csv", "report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let mut rdr = csv::Reader::from_path(a.join("table_cindex.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["scenario", "penalty", "RSF", "DeepSurv", "XGBoost", "EA", "BMA"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        for cell in r.iter().skip(2) {
            assert!(cell.contains('(') && cell.contains(','), "cell `{cell}`");
        }
    }

    // flat CSV: 6 scenario x penalty cells x (3 learners + EA + BMA)
    let flat = std::fs::read_to_string(a.join("report.csv")).unwrap();
    let mut lines = flat.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scenario,penalty,model,agg,cindex_mean,cindex_lo,cindex_hi,iauc_mean,iauc_lo,iauc_hi"
    );
    assert_eq!(lines.count(), 30);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    // report re-renders its own artifacts unchanged
    let c = dir.path().join("c");
    let out = survens(&["report", "--input", a.join("report.json").to_str().unwrap(), "--out-dir", c.to_str().unwrap()]);
    assert!(out.status.success());
    for f in ["report.csv", "table_cindex.csv", "table_iauc.csv", "report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(c.join(f)).unwrap(), "{f} changed");
    }
    // the resolved config reproduces the run
    let out = survens(&[
        "run",
        "--config",
        a.join("config.toml").to_str().unwrap(),
        "--out-dir",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(a.join("report.csv")).unwrap(),
        std::fs::read(dir.path().join("d/report.csv")).unwrap()
    );
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let cfg = write_config(dir.path(), SMALL);
    assert!(survens(&["generate", "--config", &cfg, "--out-dir", &d("gen")]).status.success());

    // the emitted data block drives a run from the CSV instead of the generator
    let data = std::fs::read_to_string(d("gen/data.toml")).unwrap().replace("cohort.csv", "gen/cohort.csv");
    let head = SMALL.split("[synth]").next().unwrap();
    let cfg2 = dir.path().join("from_csv.toml");
    std::fs::write(&cfg2, format!("{head}\n{data}")).unwrap();
    let cfg2 = cfg2.to_string_lossy().into_owned();

    let out = survens(&["impute", "--config", &cfg2, "--scenario", "2visits", "--out-dir", &d("imp")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Path::new(&d("imp/imputed_01.csv")).exists());

    let out = survens(&["select", "--config", &cfg2, "--input", &d("imp/imputed_00.csv"), "--out-dir", &d("sel")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut models = Vec::new();
    for m in ["rsf", "deepsurv", "xgboost"] {
        let path = d(&format!("models/{m}.json"));
        let out = survens(&["fit", "--config", &cfg2, "--input", &d("sel/selected.csv"), "--model", m, "--out", &path]);
        assert!(out.status.success(), "{m}: {}", String::from_utf8_lossy(&out.stderr));
        models.push(path);
    }
    let val = d("sel/selected.csv");
    let ev = d("ev");
    let mut args = vec!["evaluate", "--input", &val, "--model"];
    args.extend(models.iter().map(String::as_str));
    args.extend(["--agg", "bma", "--validation", &val, "--importance-repeats", "2", "--out-dir", &ev]);
    let out = survens(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d("ev/metrics.json")).unwrap()).unwrap();
    let c = metrics["cindex"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&c));
    let w: f64 = metrics["bma_weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-12);
    assert!(std::fs::read_to_string(d("ev/importance.csv")).unwrap().starts_with("feature,"));

    // a model cannot score a dataset with different columns
    let out = survens(&["evaluate", "--model", &models[0], "--input", &d("imp/imputed_00.csv"), "--out-dir", &d("ev2")]);
    assert_eq!(out.status.code(), Some(1));
}
