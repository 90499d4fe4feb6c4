use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = hsd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FOREST: &str = r#"{"kind": "random_forest", "params": {"n_trees": 10, "max_depth": 6, "min_leaf": 20}}"#;

#[test]
fn design_to_evaluation_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = d.join("sim.json");
    write(&sim, r#"{"scenario": 1, "n_rows": 6000}"#);
    let pop_dir = d.join("pop");
    let pre_dir = d.join("pre");
    let summary = ok(&["simulate", "--config", s(&sim), "--seed", "1", "--out", s(&pop_dir)]);
    assert_eq!(summary["n_rows"], 6000);
    ok(&["simulate", "--config", s(&sim), "--seed", "2", "--out", s(&pre_dir)]);

    let plan_cfg = d.join("plan.json");
    write(&plan_cfg, &format!(r#"{{"learner": {FOREST}, "cohort_size": 1000}}"#));
    let design = d.join("design");
    let plan = ok(&[
        "plan",
        "--pre-experiment",
        s(&pre_dir.join("population.csv")),
        "--population",
        s(&pop_dir.join("population.csv")),
        "--config",
        s(&plan_cfg),
        "--out",
        s(&design),
    ]);
    assert!(plan["p_h"].as_f64().unwrap() > 0.0);
    let curve = fs::read_to_string(design.join("design_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 100);
    assert!(curve.starts_with("p_h,threshold,realized_p_h,v_h,v_l,q_v,r_h,predicted_ratio"));

    let drawn = d.join("drawn");
    let info = ok(&[
        "sample",
        "--population",
        s(&design.join("strata.csv")),
        "--plan",
        s(&design.join("plan.json")),
        "--seed",
        "3",
        "--out",
        s(&drawn),
    ]);
    assert_eq!(info["n"], 1000);
    assert_eq!(info["n_treated"], 500);
    let cohort = fs::read_to_string(drawn.join("cohort.csv")).unwrap();
    assert!(cohort.starts_with("id,stratum,w\n"));

    // join the drawn ids with their features and recorded outcomes
    let population = fs::read_to_string(pop_dir.join("population.csv")).unwrap();
    let mut lines = population.lines();
    let header = lines.next().unwrap();
    let by_id: HashMap<&str, &str> = lines.map(|l| (l.split(',').next().unwrap(), l)).collect();
    let mut joined = format!("{header},stratum\n");
    for l in cohort.lines().skip(1) {
        let mut f = l.split(',');
        let id = f.next().unwrap();
        joined.push_str(&format!("{},{}\n", by_id[id], f.next().unwrap()));
    }
    let joined_path = d.join("joined.csv");
    write(&joined_path, &joined);

    let est = ok(&[
        "estimate",
        "--cohort",
        s(&joined_path),
        "--plan",
        s(&design.join("plan.json")),
    ]);
    assert_eq!(est["method"], "hs");
    assert_eq!(est["n"], 1000);
    assert!(est["variance_hat"].as_f64().unwrap() > 0.0);

    let train_cfg = d.join("train.json");
    write(&train_cfg, r#"{"meta": "T", "learner": {"kind": "glm", "params": {}}}"#);
    let model_dir = d.join("model");
    ok(&[
        "train",
        "--cohort",
        s(&joined_path),
        "--config",
        s(&train_cfg),
        "--out",
        s(&model_dir),
    ]);
    assert!(model_dir.join("model.json").exists());

    let eval_dir = d.join("eval");
    let eval = ok(&[
        "evaluate",
        "--scores",
        s(&model_dir.join("scores.csv")),
        "--cohort",
        s(&joined_path),
        "--plan",
        s(&design.join("plan.json")),
        "--truth",
        s(&pop_dir.join("truth.csv")),
        "--out",
        s(&eval_dir),
    ]);
    assert_eq!(eval["correction"], "hs");
    assert_eq!(eval["auq_estimator"], "oracle_cdf");
    let qini = fs::read_to_string(eval_dir.join("curve.csv")).unwrap();
    assert_eq!(qini.lines().count(), 11);
    assert!(qini.starts_with("t,ate_t,q,variance_hat"));
}

#[test]
fn robustness_writes_one_file_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("r.json");
    write(&cfg, r#"{"scenario": 1, "n_rows": 20000, "nu_grid": [1.0, 20.0]}"#);
    let out = ok(&["robustness", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out["optimal"].as_array().unwrap().len(), 2);
    for mode in ["overfit", "optimal"] {
        let csv = fs::read_to_string(dir.path().join(format!("robustness_{mode}.csv"))).unwrap();
        assert!(csv.starts_with("nu,accuracy,vr_unadjusted,vr_adjusted\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}

#[test]
fn experiment_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e.json");
    write(
        &cfg,
        &format!(
            r#"{{"pipeline": "evaluation", "data": {{"kind": "simulated", "scenario": 1}},
                "repetitions": 4,
                "sizes": {{"pre_experiment": 3000, "population": 6000, "cohort": 800, "test": 0, "uplift_training": 2000}},
                "outcome_learner": {FOREST},
                "uplift": {{"meta": "T", "learner": {FOREST}}}}}"#
        ),
    );
    let a = hsd(&["experiment", "--config", s(&cfg), "--seed", "5", "--out", s(dir.path())]);
    let b = hsd(&["experiment", "--config", s(&cfg), "--seed", "5", "--out", s(dir.path())]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stderr).contains("runtime"));
    let saved = fs::read(dir.path().join("report.json")).unwrap();
    assert_eq!(saved, a.stdout);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let missing = hsd(&["estimate", "--cohort", s(&d.join("nope.csv"))]);
    assert_eq!(missing.status.code(), Some(3));

    let bad = d.join("bad.csv");
    write(&bad, "id,x1,w,y\n0,1.0,1,1\n1,2.0,0,2\n");
    let out = hsd(&["estimate", "--cohort", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let cfg = d.join("c.json");
    write(&cfg, r#"{"scenario": 1, "n_rows": 10, "colour": "red"}"#);
    assert_eq!(hsd(&["simulate", "--config", s(&cfg)]).status.code(), Some(2));

    write(&cfg, r#"{"scenario": 1, "n_rows": 10, "n_features": 3}"#);
    assert_eq!(hsd(&["simulate", "--config", s(&cfg)]).status.code(), Some(2));

    let arm = d.join("arm.csv");
    write(&arm, "id,x1,w,y\n0,1.0,1,1\n1,2.0,1,0\n");
    assert_eq!(hsd(&["estimate", "--cohort", s(&arm)]).status.code(), Some(3));
}
