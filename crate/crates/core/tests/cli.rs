use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pseudoweight"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a cohort (x, z, grp, __outcome) and survey (x, z, __weight) pair.
fn fixtures(dir: &Path, with_weight: bool) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut cohort = String::from("x,z,grp,__outcome\n");
    for i in 0..150 {
        let x: f64 = 0.4 + rng.sample::<f64, _>(StandardNormal);
        let z = if rng.random::<f64>() < 0.6 { "a" } else { "b" };
        let y = 1.0 + x + rng.sample::<f64, _>(StandardNormal);
        cohort.push_str(&format!("{x},{z},{},{y}\n", if i % 2 == 0 { "even" } else { "odd" }));
    }
    let mut survey = String::from(if with_weight { "x,z,__weight\n" } else { "x,z\n" });
    for _ in 0..200 {
        let x: f64 = rng.sample(StandardNormal);
        let z = if rng.random::<f64>() < 0.4 { "a" } else { "b" };
        if with_weight {
            survey.push_str(&format!("{x},{z},{}\n", rng.random_range(5.0..20.0)));
        } else {
            survey.push_str(&format!("{x},{z}\n"));
        }
    }
    let c = dir.join("cohort.csv");
    let s = dir.join("survey.csv");
    fs::write(&c, cohort).unwrap();
    fs::write(&s, survey).unwrap();
    (c, s)
}

#[test]
fn weight_writes_files_and_metadata() {
    let dir = TempDir::new().unwrap();
    let (c, s) = fixtures(dir.path(), true);
    let out = dir.path().join("out");
    let o = run(&["weight", "--cohort", c.to_str().unwrap(), "--survey", s.to_str().unwrap(), "--model-cols", "x,z", "--methods", "IPSW.S,KW", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("weights_IPSW.S.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "id,method,weight");
    assert_eq!(lines.clone().count(), 150);
    let total: f64 = lines.map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap()).sum();
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("weights_IPSW.S.json")).unwrap()).unwrap();
    assert!((meta["sum_weights"].as_f64().unwrap() - total).abs() < 1e-6 * total);
    assert_eq!(meta["fit"]["converged"], true);
    assert!(meta["fit"]["columns"].as_array().unwrap().iter().any(|c| c == "z=b"));
    let kw: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("weights_KW.json")).unwrap()).unwrap();
    assert!(kw["bandwidth"].as_f64().unwrap() > 0.0);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn scale_flag_upgrades_methods() {
    let dir = TempDir::new().unwrap();
    let (c, s) = fixtures(dir.path(), true);
    let out = dir.path().join("out");
    let o = run(&["weight", "--cohort", c.to_str().unwrap(), "--survey", s.to_str().unwrap(), "--model-cols", "x,z", "--methods", "IPSW,KW.W", "--scale", "on", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("weights_IPSW.S.csv").exists() && out.join("weights_KW.S.csv").exists());
    assert!(!out.join("weights_IPSW.csv").exists());
}

#[test]
fn unknown_method_exits_2() {
    let dir = TempDir::new().unwrap();
    let (c, s) = fixtures(dir.path(), true);
    let o = run(&["weight", "--cohort", c.to_str().unwrap(), "--survey", s.to_str().unwrap(), "--methods", "PSAS", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("IPSW, IPSW.S, KW, KW.W, KW.S"), "{}", stderr(&o));
}

#[test]
fn missing_weight_column_exits_2() {
    let dir = TempDir::new().unwrap();
    let (c, s) = fixtures(dir.path(), false);
    let o = run(&["weight", "--cohort", c.to_str().unwrap(), "--survey", s.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("__weight"), "{}", stderr(&o));
}

#[test]
fn separated_samples_exit_3() {
    let dir = TempDir::new().unwrap();
    let c = dir.path().join("c.csv");
    let s = dir.path().join("s.csv");
    fs::write(&c, (0..30).fold(String::from("x\n"), |acc, i| acc + &format!("{}\n", 10.0 + i as f64 / 30.0))).unwrap();
    fs::write(&s, (0..30).fold(String::from("x,__weight\n"), |acc, i| acc + &format!("{},5\n", i as f64 / 30.0))).unwrap();
    let args = ["weight", "--cohort", c.to_str().unwrap(), "--survey", s.to_str().unwrap(), "--methods", "IPSW", "--out", dir.path().to_str().unwrap()];
    let o = run(&args);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let mut allow = args.to_vec();
    allow.push("--allow-nonconverged");
    assert!(run(&allow).status.success());
}

#[test]
fn estimate_with_domains_and_jackknife() {
    let dir = TempDir::new().unwrap();
    let (c, s) = fixtures(dir.path(), true);
    let out = dir.path().join("est");
    let base = ["estimate", "--cohort", c.to_str().unwrap(), "--survey", s.to_str().unwrap(), "--model-cols", "x,z", "--methods", "KW.S,IPSW.S"];
    let mut args = base.to_vec();
    args.extend(["--groups", "10", "--seed", "3", "--out", out.to_str().unwrap()]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("estimates.json")).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        let mu = r["mu_hat"].as_f64().unwrap();
        let ci = r["ci"].as_array().unwrap();
        assert!(ci[0].as_f64().unwrap() < mu && mu < ci[1].as_f64().unwrap());
        assert!(r["var_jk"].as_f64().unwrap() > 0.0);
        assert!(r["warnings"].is_array());
    }

    let out2 = dir.path().join("dom");
    let mut args = base.to_vec();
    args.extend(["--by", "grp", "--out", out2.to_str().unwrap()]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(out2.join("estimates.json")).unwrap()).unwrap();
    let groups: Vec<&str> = reports.as_array().unwrap().iter().map(|r| r["group"].as_str().unwrap()).collect();
    assert_eq!(groups, ["even", "odd", "even", "odd"]);
}

#[test]
fn diagnose_emits_pairs_and_summary() {
    let dir = TempDir::new().unwrap();
    let (c, s) = fixtures(dir.path(), true);
    let out = dir.path().join("sea");
    let o = run(&["diagnose", "--cohort", c.to_str().unwrap(), "--survey", s.to_str().unwrap(), "--model-cols", "x,z", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pairs = fs::read_to_string(out.join("sea_pairs.csv")).unwrap();
    assert!(pairs.starts_with("q,q_tilde\n"));
    assert_eq!(pairs.lines().count(), 151);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sea_summary.json")).unwrap()).unwrap();
    let r2 = summary["r2_func"].as_f64().unwrap();
    assert!(r2 <= 1.0 && summary["compatible"].is_boolean());
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("scenario.json");
    fs::write(
        &config,
        r#"{"population_size": 4000, "n_cohort": 150, "n_survey": 150, "replicates": 4,
            "alpha": [0.6, 0.15, 0.24], "gamma": [-0.4, -0.1, 0.16], "seed": 0, "jackknife_groups": 3}"#,
    )
    .unwrap();
    let outputs: Vec<PathBuf> = (0..2).map(|k| dir.path().join(format!("run{k}"))).collect();
    for out in &outputs {
        let o = run(&["simulate", "--config", config.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["metrics.csv", "metrics.json", "manifest.json"] {
        assert_eq!(fs::read(outputs[0].join(file)).unwrap(), fs::read(outputs[1].join(file)).unwrap(), "{file}");
    }
    let csv = fs::read_to_string(outputs[0].join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.starts_with("estimator,%RB,V x10^3,VR(TL),VR(JK),CP(TL),CP(JK),MSE x10^3\n"));
}

#[test]
fn simulate_rejects_zero_replicates() {
    let dir = TempDir::new().unwrap();
    let o = run(&["simulate", "--preset", "scenario1", "--replicates", "0", "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&["simulate", "--preset", "scenario9", "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
