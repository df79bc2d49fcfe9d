use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tlmest::datagen::{generate, CoeffFamily, Design, Dims, ScenarioConfig};
use tlmest::io::{save_dataset, write_study};
use tlmest::transfer::{pooled_estimate, FineTune, TransferConfig};
use tlmest::{LossFamily, Regularizer, SolverOptions};

fn tlmest(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlmest"))
        .current_dir(dir)
        .env_remove("TLMEST_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn values(v: &Value) -> Vec<f64> {
    v["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn small_scenario(sources: usize) -> ScenarioConfig {
    ScenarioConfig {
        design: Design::HomoIdentity,
        coeff_family: CoeffFamily::L0Sparse,
        dims: Dims::Vector { p: 30, s: 3 },
        sample_sizes: vec![80; sources + 1],
        contrast_level: 0.0,
        informative_count: sources,
        family: LossFamily::SquaredIdentity,
        seed: 11,
    }
}

/// Writes the datasets of a small study as CSV files, target first.
fn fixture_files(dir: &Path, sources: usize) -> Vec<String> {
    let study = generate(&small_scenario(sources)).unwrap();
    study
        .datasets
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let name = format!("d{k}.csv");
            save_dataset(&dir.join(&name), d).unwrap();
            name
        })
        .collect()
}

#[test]
fn experiment_csv_is_byte_identical_across_runs_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["experiment", "--preset", "table2-desk", "--seed", "7", "--replications", "2"];
    let mut a = base.to_vec();
    a.extend(["--out", "a"]);
    let mut b = base.to_vec();
    b.extend(["--out", "b", "--jobs", "2"]);
    ok(&tlmest(dir.path(), &a));
    ok(&tlmest(dir.path(), &b));
    let ra = std::fs::read(dir.path().join("a/records.csv")).unwrap();
    let rb = std::fs::read(dir.path().join("b/records.csv")).unwrap();
    assert!(!ra.is_empty());
    assert_eq!(ra, rb);
    let header = String::from_utf8(ra).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "scenario,seed,estimator,err_l1,err_l2,err_nuc,err_fro,tpr,tnr,seconds");
    let summary = read_json(&dir.path().join("a/summary.json"));
    assert_eq!(summary["scale"], "desk");
    let manifest = read_json(&dir.path().join("a/manifest.json"));
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["experiment"]["replications"], 2);
}

#[test]
fn select_without_contrast_penalty_matches_separate_fits() {
    let dir = tempfile::tempdir().unwrap();
    let files = fixture_files(dir.path(), 1);
    let lambda = "0.05";
    ok(&tlmest(
        dir.path(),
        &["select", "--data", &files[0], &files[1], "--lambda-pool", lambda, "--lambda-q", "0", "--tau", "1", "--out", "sel.json"],
    ));
    let sel = read_json(&dir.path().join("sel.json"));
    for (k, file) in files.iter().enumerate() {
        let out = format!("fit{k}.json");
        ok(&tlmest(dir.path(), &["fit", "--data", file, "--lambda", lambda, "--out", &out]));
        let fit = values(&read_json(&dir.path().join(&out))["parameter"]);
        let theta = if k == 0 { values(&sel["primal"]) } else { values(&sel["sources"][k - 1]) };
        let gap = fit.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-4, "dataset {k}: max gap {gap}");
    }
}

#[test]
fn transfer_without_finetuning_returns_the_pooled_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let files = fixture_files(dir.path(), 2);
    let mut args = vec!["transfer", "--data"];
    args.extend(files.iter().map(String::as_str));
    args.extend(["--lambda-pool", "0.04", "--finetune", "none", "--out", "tr.json"]);
    ok(&tlmest(dir.path(), &args));
    let tr = read_json(&dir.path().join("tr.json"));
    assert_eq!(values(&tr["primal"]), values(&tr["finetuned"]));
    assert!(values(&tr["delta"]).iter().all(|v| *v == 0.0));
    let datasets = generate(&small_scenario(2)).unwrap().datasets;
    let cfg = TransferConfig {
        lambda_pool: 0.04,
        finetune: FineTune::None,
        regularizer: Regularizer::L1,
        solver: SolverOptions::default(),
    };
    let direct = pooled_estimate(&datasets, &cfg).unwrap();
    let cli = values(&tr["primal"]);
    let gap = cli.iter().zip(direct.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // CSV stores shortest round-trip decimals, so the fits agree to rounding
    assert!(gap < 1e-10, "gap {gap}");
    assert!(dir.path().join("tr.manifest.json").exists());
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), r#"{"sede": 3}"#).unwrap();
    let out = tlmest(dir.path(), &["--config", "cfg.json", "experiment", "--preset", "table1-desk"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
    let out = tlmest(dir.path(), &["experiment", "--preset", "nope", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tlmest(dir.path(), &["fit", "--data", "absent.csv", "--lambda", "0.1", "--out", "f.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
}

#[test]
fn strict_turns_non_convergence_into_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let files = fixture_files(dir.path(), 1);
    let cfg = r#"{"fit": {"solver": {"max_iterations": 1, "max_outer_iterations": 1, "max_admm_iterations": 1,
        "tolerance": 1e-12, "admm_rho": 1.0, "admm_rho1": 1.0, "admm_rho2": 1.0,
        "residual_abs": 1e-12, "residual_rel": 1e-12}}}"#;
    std::fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    let args = ["--config", "cfg.json", "fit", "--data", &files[0], "--lambda", "0.01", "--out", "f.json"];
    ok(&tlmest(dir.path(), &args));
    let mut strict = vec!["--strict"];
    strict.extend(args);
    assert_eq!(tlmest(dir.path(), &strict).status.code(), Some(2));
}

#[test]
fn seed_from_environment_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, extra: &[&str], out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tlmest"));
        cmd.current_dir(dir.path()).env_remove("TLMEST_SEED");
        if let Some(s) = env {
            cmd.env("TLMEST_SEED", s);
        }
        let mut args = vec!["generate", "--preset", "table1-desk", "--out", out];
        args.extend(extra);
        let o = cmd.args(&args).output().unwrap();
        ok(&o);
        std::fs::read(dir.path().join(out).join("dataset_0.csv")).unwrap()
    };
    let from_env = run(Some("99"), &[], "env");
    let from_flag = run(None, &["--seed", "99"], "flag");
    let default = run(None, &[], "default");
    assert_eq!(from_env, from_flag);
    assert_ne!(from_env, default);
    let manifest = read_json(&dir.path().join("env/manifest.json"));
    assert_eq!(manifest["seed"], 99);
}

#[test]
fn generate_then_fit_study_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let study = generate(&small_scenario(1)).unwrap();
    write_study(&dir.path().join("s"), &study, None).unwrap();
    ok(&tlmest(dir.path(), &["fit", "--study", "s", "--index", "1", "--out", "f.json"]));
    let fit = read_json(&dir.path().join("f.json"));
    assert!(fit["cv"]["lambda"].as_f64().unwrap() > 0.0);
    assert_eq!(fit["parameter"]["values"].as_array().unwrap().len(), 30);
    let out = tlmest(dir.path(), &["fit", "--study", "s", "--index", "5", "--out", "g.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_aggregates_records() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "scenario,seed,estimator,err_l1,err_l2,err_nuc,err_fro,tpr,tnr,seconds\n\
               a,1,vanilla,1.0,2.0,,,,,\n\
               a,2,vanilla,3.0,4.0,,,,,\n\
               a,1,truncated,0.5,1.0,,,1.0,1.0,\n\
               a,2,truncated,0.5,5.0,,,1.0,0.5,\n";
    std::fs::write(dir.path().join("r.csv"), csv).unwrap();
    ok(&tlmest(dir.path(), &["report", "r.csv", "--frequencies", "--out", "rep.json"]));
    let rep = read_json(&dir.path().join("rep.json"));
    assert_eq!(rep["records"], 4);
    let agg = &rep["aggregates"][0];
    assert_eq!(agg["estimator"], "vanilla");
    assert_eq!(agg["err_l1"]["mean"], 2.0);
    assert_eq!(agg["err_l1"]["se"], 1.0);
    let freq = &rep["frequencies"][0]["frequencies"];
    assert_eq!(freq["vanilla"], 0.5);
    assert_eq!(freq["truncated"], 0.5);
}
