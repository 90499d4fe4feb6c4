use hsd::harness::{
    confidence_interval, run_evaluation_experiment, AdjustmentConfig, EvaluationConfig, EvaluationReport, Sizes,
};
use hsd_core::estimation::Method;
use hsd_core::learners::{ForestParams, OutcomeLearnerSpec};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn config(oversampling_ratio: Option<f64>) -> EvaluationConfig {
    let forest = OutcomeLearnerSpec::RandomForest(ForestParams {
        n_trees: 40,
        ..Default::default()
    });
    let mut c: EvaluationConfig = serde_json::from_value(serde_json::json!({
        "data": {"kind": "simulated", "scenario": 3},
        "repetitions": 300,
        "seed": 3,
    }))
    .unwrap();
    c.sizes = Sizes {
        pre_experiment: 30_000,
        population: 60_000,
        cohort: 6_000,
        test: 0,
        uplift_training: 4_000,
    };
    c.outcome_learner = forest;
    c.uplift.learner = forest;
    c.adjustment = Some(AdjustmentConfig::Oracle);
    c.plan.oversampling_ratio = oversampling_ratio;
    c
}

fn reduction(r: &EvaluationReport, m: Method) -> f64 {
    r.estimators.iter().find(|e| e.method == m).unwrap().variance_reduction_pct.unwrap()
}

/// Rough Monte Carlo standard error of `100 (1 - v / v_dim)` in points.
fn reduction_se(r: &EvaluationReport, m: Method) -> f64 {
    let n = r.repetitions as f64;
    let ratio = 1.0 - reduction(r, m) / 100.0;
    100.0 * ratio * (4.0 / (n - 1.0)).sqrt()
}

#[test]
fn combined_estimator_dominates() {
    let r = run_evaluation_experiment(&config(None)).unwrap();
    let hs = reduction(&r, Method::Hs);
    let ca = reduction(&r, Method::Covadj);
    let hsca = reduction(&r, Method::HsCovadj);
    let se = reduction_se(&r, Method::HsCovadj).max(reduction_se(&r, Method::Hs));
    assert!(hsca >= hs.max(ca) - 3.0 * se, "hsca {hsca} hs {hs} ca {ca} se {se}");
    assert!(hs > 0.0);
}

#[test]
fn proportional_allocation_keeps_only_stratification_gain() {
    let optimal = run_evaluation_experiment(&config(None)).unwrap();
    let proportional = run_evaluation_experiment(&config(Some(1.0))).unwrap();
    let hs_opt = reduction(&optimal, Method::Hs);
    let hs_prop = reduction(&proportional, Method::Hs);
    let post = reduction(&proportional, Method::Stratified);
    let se = reduction_se(&proportional, Method::Hs);
    assert!(hs_prop > 0.0, "proportional HS {hs_prop}");
    assert!(hs_prop < hs_opt, "proportional {hs_prop} vs optimal {hs_opt}");
    assert!((hs_prop - post).abs() < 4.0 * se.max(5.0), "proportional {hs_prop} vs post-stratified {post}");
}

#[test]
fn interval_coverage_is_nominal() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let meta = 400;
    let mut covered = 0;
    for _ in 0..meta {
        let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (lo, hi) = confidence_interval(&xs, 0.95).unwrap();
        covered += (lo <= 0.0 && 0.0 <= hi) as usize;
    }
    // binomial sd at 400 trials is about 1.1 points
    let rate = covered as f64 / meta as f64;
    assert!((rate - 0.95).abs() < 0.035, "coverage {rate}");
}
