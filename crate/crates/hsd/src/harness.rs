//! Repeated-cohort experiments: variance of ATE and Qini estimates across
//! cohort draws, and the AUQ gain of models trained on HS cohorts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use hsd_core::design::{default_grid, design_curve, select_plan, DesignCurve, SamplingPlan};
use hsd_core::estimation::{
    covariate_adjusted_ate, diff_in_means, hs_estimate, oracle_adjusted_ate, stratified_ate,
    AteEstimate, CrossFittedAdjustment, HsAdjustment, Method,
};
use hsd_core::evaluation::{
    auq_decile, auq_oracle, hs_qini_curve, qini_curve, truth_qini_curve, QiniCurve, QiniInput,
    QiniMode, Reference,
};
use hsd_core::learners::{fit, predict_proba, OutcomeLearnerSpec};
use hsd_core::sampling::{
    assign_treatment_with, draw_cohort, draw_uniform, stratify_predictions, Assignment, Cohort,
    Stratum,
};
use hsd_core::simulation::{
    generate_population, generate_scenario, generate_untreated, realize_outcomes, Scenario,
    ScenarioSpec,
};
use hsd_core::uplift::{fit_uplift, predict_cate, MetaKind, UpliftSpec};
use hsd_core::frame::split_frame;
use hsd_core::{PopulationFrame, SeedSpec, SimulatedTruth};

use crate::error::{HsdError, Result};
use crate::io::{load_csv, ColumnSchema};

pub const Z_975: f64 = 1.959963984540054;

/// Where individuals come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Scenario generator with known effects; cohort outcomes are drawn
    /// after assignment.
    Simulated {
        scenario: Scenario,
        #[serde(default = "default_n_features")]
        n_features: usize,
    },
    /// An RCT data file; cohorts keep their recorded treatment and outcome.
    Csv {
        path: String,
        #[serde(default)]
        schema: Option<ColumnSchema>,
    },
}

fn default_n_features() -> usize {
    10
}

/// Which predictions the design curve is estimated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DesignSource {
    #[default]
    Population,
    PreExperiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOptions {
    /// Candidate `p_H` values; `None` means `j/100` for `j = 1..99`.
    pub grid: Option<Vec<f64>>,
    pub adjust: bool,
    /// Forces `R_H` (for example 1 for proportional allocation).
    pub oversampling_ratio: Option<f64>,
    pub design_source: DesignSource,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            grid: None,
            adjust: true,
            oversampling_ratio: None,
            design_source: DesignSource::Population,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sizes {
    pub pre_experiment: usize,
    pub population: usize,
    pub cohort: usize,
    pub test: usize,
    /// Uniform RCT used to train the fixed model of the evaluation pipeline.
    pub uplift_training: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            pre_experiment: 100_000,
            population: 250_000,
            cohort: 20_000,
            test: 250_000,
            uplift_training: 20_000,
        }
    }
}

/// Outcome adjustment for the covariate-adjusted estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdjustmentConfig {
    /// True `mu0` and `tau` (simulation only).
    Oracle,
    CrossFitted {
        #[serde(default)]
        learner: OutcomeLearnerSpec,
        #[serde(default = "default_folds")]
        folds: usize,
    },
}

fn default_folds() -> usize {
    5
}

/// How reductions are computed from the repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceBasis {
    /// Variance of the estimates across repetitions.
    Empirical,
    /// Mean of the per-repetition variance estimates; for cohorts drawn from
    /// one finite data set, where repetitions overlap.
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub data: DataSource,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub sizes: Sizes,
    #[serde(default = "default_treatment_p")]
    pub treatment_p: f64,
    #[serde(default)]
    pub outcome_learner: OutcomeLearnerSpec,
    #[serde(default = "default_uplift")]
    pub uplift: UpliftSpec,
    #[serde(default)]
    pub plan: PlanOptions,
    #[serde(default)]
    pub assignment: Assignment,
    #[serde(default)]
    pub adjustment: Option<AdjustmentConfig>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Method>,
    #[serde(default = "default_qini_grid")]
    pub qini_grid: usize,
    #[serde(default)]
    pub qini_mode: QiniMode,
    #[serde(default)]
    pub variance_basis: Option<VarianceBasis>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub data: DataSource,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub sizes: Sizes,
    #[serde(default = "default_treatment_p")]
    pub treatment_p: f64,
    #[serde(default)]
    pub outcome_learner: OutcomeLearnerSpec,
    #[serde(default = "default_models")]
    pub models: Vec<UpliftSpec>,
    #[serde(default)]
    pub plan: PlanOptions,
    #[serde(default)]
    pub assignment: Assignment,
    /// Slice count for the decile AUQ used when effects are unknown.
    #[serde(default = "default_auq_grid")]
    pub auq_grid: usize,
    #[serde(default = "default_level")]
    pub confidence_level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_repetitions() -> usize {
    1000
}
fn default_treatment_p() -> f64 {
    0.5
}
fn default_uplift() -> UpliftSpec {
    UpliftSpec {
        meta: MetaKind::T,
        learner: OutcomeLearnerSpec::random_forest(),
    }
}
fn default_models() -> Vec<UpliftSpec> {
    vec![default_uplift()]
}
fn default_estimators() -> Vec<Method> {
    vec![
        Method::Dim,
        Method::Stratified,
        Method::Covadj,
        Method::Hs,
        Method::HsCovadj,
    ]
}
fn default_qini_grid() -> usize {
    10
}
fn default_auq_grid() -> usize {
    100
}
fn default_level() -> f64 {
    0.95
}

/// Either pipeline, selected by the `pipeline` key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pipeline", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Training(TrainingConfig),
    Evaluation(EvaluationConfig),
}

impl ExperimentConfig {
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Self::Training(c) => c.seed = seed,
            Self::Evaluation(c) => c.seed = seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum ExperimentReport {
    Training(TrainingReport),
    Evaluation(EvaluationReport),
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(match config {
        ExperimentConfig::Training(c) => ExperimentReport::Training(run_training_experiment(c)?),
        ExperimentConfig::Evaluation(c) => ExperimentReport::Evaluation(run_evaluation_experiment(c)?),
    })
}

/// `mean ± z sd / sqrt(n)` with `z` the two-sided normal quantile for `level`.
pub fn confidence_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(hsd_core::Error::Validation(format!(
            "confidence interval needs at least 2 samples, got {}",
            samples.len()
        ))
        .into());
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(hsd_core::Error::Validation(format!("confidence level {level} outside (0,1)")).into());
    }
    let z = if level == 0.95 {
        Z_975
    } else {
        Normal::standard().inverse_cdf(0.5 + level / 2.0)
    };
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let half = z * (var / n).sqrt();
    Ok((mean - half, mean + half))
}

/// Mean, unbiased variance and Monte Carlo standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub mc_se: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let variance = if n > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            n,
            mean,
            variance,
            mc_se: (variance / n as f64).sqrt(),
        }
    }
}

fn run_reps<T: Send>(
    repetitions: usize,
    workers: Option<usize>,
    job: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<(Vec<T>, usize, Option<String>)> {
    if repetitions == 0 {
        return Err(HsdError::Config("repetitions must be at least 1".into()));
    }
    let collect = || (0..repetitions).into_par_iter().map(&job).collect::<Vec<_>>();
    let results = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| HsdError::Config(format!("thread pool: {e}")))?
            .install(collect),
        None => collect(),
    };
    let mut ok = Vec::with_capacity(repetitions);
    let mut failed = 0;
    let mut first = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed += 1;
                first.get_or_insert_with(|| e.to_string());
            }
        }
    }
    // more than 1% of repetitions failing invalidates the run
    if failed * 100 > repetitions {
        return Err(HsdError::TooManyFailures {
            failed,
            total: repetitions,
            first: first.unwrap_or_default(),
        });
    }
    Ok((ok, failed, first))
}

/// Population, strata and plan shared by every repetition.
pub struct World {
    pub population: PopulationFrame,
    /// Known effects of the population rows (simulation only).
    pub truth: Option<SimulatedTruth>,
    pub predictions: Vec<f64>,
    pub curve: DesignCurve,
    pub plan: SamplingPlan,
    pub labels: Vec<Stratum>,
    /// Rows set aside before the population (CSV sources).
    pub held_out: Option<PopulationFrame>,
}

fn scenario_spec(scenario: Scenario, n_features: usize, rows: usize, seed: &SeedSpec) -> ScenarioSpec {
    ScenarioSpec {
        scenario,
        n_rows: rows,
        n_features,
        treatment_p: 0.5,
        seed: seed.derive_u64(),
    }
}

fn share_above(predictions: &[f64], threshold: f64) -> f64 {
    predictions.iter().filter(|&&p| p > threshold).count() as f64 / predictions.len() as f64
}

impl World {
    /// Fits the pre-experiment model, scores the population and picks the plan.
    ///
    /// CSV sources are split into pre-experiment rows, `held_out` rows of
    /// size `held_out_rows`, and the population (the rest). The
    /// pre-experiment model is fitted on control rows only.
    pub fn build(
        data: &DataSource,
        sizes: &Sizes,
        held_out_rows: usize,
        treatment_p: f64,
        learner: &OutcomeLearnerSpec,
        options: &PlanOptions,
        seed: &SeedSpec,
    ) -> Result<Self> {
        let (pre, population, truth, held_out) = match data {
            DataSource::Simulated { scenario, n_features } => {
                let (pre, _) = generate_untreated(&scenario_spec(
                    *scenario,
                    *n_features,
                    sizes.pre_experiment,
                    &seed.child("pre_experiment"),
                ))?;
                let (pop, truth) = generate_population(&scenario_spec(
                    *scenario,
                    *n_features,
                    sizes.population,
                    &seed.child("population"),
                ))?;
                (pre, pop, Some(truth), None)
            }
            DataSource::Csv { path, schema } => {
                let frame = load_csv(std::path::Path::new(path), schema.as_ref())?;
                frame.require_outcome()?;
                frame.require_treatment()?;
                let rest = frame
                    .n_rows()
                    .checked_sub(sizes.pre_experiment + held_out_rows)
                    .filter(|&r| r > 0)
                    .ok_or_else(|| {
                        HsdError::Config(format!(
                            "{path} has {} rows, fewer than pre-experiment + held-out sizes",
                            frame.n_rows()
                        ))
                    })?;
                let mut parts = split_frame(
                    &frame,
                    &[sizes.pre_experiment, held_out_rows, rest],
                    &seed.child("split"),
                )?;
                let pop = parts.pop().expect("three parts");
                let held = parts.pop().expect("three parts");
                let pre_all = parts.pop().expect("three parts");
                let controls = pre_all.arm_rows(0)?;
                let pre = pre_all.select(&controls);
                (pre, pop, None, (held_out_rows > 0).then_some(held))
            }
        };
        let model = fit(
            learner,
            pre.features(),
            pre.require_outcome()?,
            &seed.child("outcome_model"),
        )?;
        let predictions = predict_proba(&model, population.features())?;
        let grid = options.grid.clone().unwrap_or_else(default_grid);
        let curve = match options.design_source {
            DesignSource::Population => design_curve(&predictions, &grid)?,
            DesignSource::PreExperiment => {
                design_curve(&predict_proba(&model, pre.features())?, &grid)?
            }
        };
        let mut plan = select_plan(&curve, sizes.cohort, treatment_p, options.adjust)?;
        // stratum weights are the realised population shares
        plan.population_p_h = share_above(&predictions, plan.threshold);
        plan.population_p_h_adjusted = share_above(&predictions, plan.threshold_adjusted);
        if let Some(r) = options.oversampling_ratio {
            plan = plan.with_ratio(r);
        }
        let labels = stratify_predictions(&predictions, plan.effective_threshold());
        Ok(Self {
            population,
            truth,
            predictions,
            curve,
            plan,
            labels,
            held_out,
        })
    }

    /// Treatment and outcome of a drawn cohort: assigned and simulated when
    /// effects are known, read from the data otherwise.
    fn realize(
        &self,
        cohort: Cohort,
        treatment_p: f64,
        assignment: Assignment,
        seed: &SeedSpec,
    ) -> Result<Realized> {
        match &self.truth {
            Some(truth) => {
                let cohort = assign_treatment_with(&cohort, treatment_p, assignment, &seed.child("w"))?;
                let truth = truth.select(&cohort.rows);
                let w = cohort.require_treatment()?.to_vec();
                let y = realize_outcomes(&truth, &w, &seed.child("y"))?;
                Ok(Realized {
                    cohort,
                    w,
                    y,
                    truth: Some(truth),
                })
            }
            None => {
                let sub = self.population.select(&cohort.rows);
                let w = sub.require_treatment()?.to_vec();
                let y = sub.require_outcome()?.to_vec();
                let mut cohort = cohort;
                cohort.treatment = Some(w.clone());
                Ok(Realized {
                    cohort,
                    w,
                    y,
                    truth: None,
                })
            }
        }
    }

    fn draw_pair(
        &self,
        treatment_p: f64,
        assignment: Assignment,
        seed: &SeedSpec,
    ) -> Result<(Realized, Realized)> {
        let n = self.plan.n;
        let u = draw_uniform(&self.population, &self.labels, n, &seed.child("uniform"))?;
        let h = draw_cohort(&self.population, &self.labels, &self.plan, &seed.child("hs"))?;
        Ok((
            self.realize(u, treatment_p, assignment, &seed.child("uniform"))?,
            self.realize(h, treatment_p, assignment, &seed.child("hs"))?,
        ))
    }

    fn cohort_frame(&self, r: &Realized) -> Result<PopulationFrame> {
        Ok(self
            .population
            .select(&r.cohort.rows)
            .with_treatment(r.w.clone())?
            .with_outcome(r.y.clone())?)
    }
}

struct Realized {
    cohort: Cohort,
    w: Vec<u8>,
    y: Vec<u8>,
    truth: Option<SimulatedTruth>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub method: Method,
    /// Cohort the estimator runs on: `uniform` or `hs`.
    pub cohort: &'static str,
    pub moments: Moments,
    /// `mean - true ATE`, simulation only.
    pub bias: Option<f64>,
    pub mean_variance_hat: f64,
    /// `100 (1 - Var_method / Var_dim)` on the configured variance basis.
    pub variance_reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct QiniPointSummary {
    pub t: f64,
    pub present: usize,
    pub mean_q: Option<f64>,
    pub variance: Option<f64>,
    pub mc_se: Option<f64>,
    pub mean_variance_hat: Option<f64>,
    /// Population `E[tau | top t] t` under the fixed model's ranking.
    pub truth_q: Option<f64>,
    /// Variance reduction against the uniform, unadjusted curve at this point.
    pub variance_reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct QiniSummary {
    /// `none`, `covadj`, `hs`, `hs_covadj`, or `uncorrected_hs` for the
    /// plain curve computed on HS cohorts.
    pub label: &'static str,
    pub points: Vec<QiniPointSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub pipeline: &'static str,
    pub seed: u64,
    pub repetitions: usize,
    pub failed_repetitions: usize,
    pub first_failure: Option<String>,
    pub variance_basis: VarianceBasis,
    pub plan: SamplingPlan,
    pub true_ate: Option<f64>,
    pub estimators: Vec<EstimatorSummary>,
    pub qini: Vec<QiniSummary>,
}

struct EvalRep {
    estimates: Vec<AteEstimate>,
    curves: Vec<QiniCurve>,
}

const QINI_LABELS: [&str; 5] = ["none", "covadj", "hs", "hs_covadj", "uncorrected_hs"];

fn adjustment_for(world: &World, config: &EvaluationConfig) -> Result<Option<AdjustmentConfig>> {
    let wanted = config.estimators.iter().any(|m| matches!(m, Method::Covadj | Method::OracleCovadj | Method::HsCovadj));
    match (config.adjustment, &world.truth) {
        (Some(AdjustmentConfig::Oracle), None) => Err(HsdError::Config(
            "oracle adjustment needs simulated data with known effects".into(),
        )),
        (Some(a), _) => Ok(Some(a)),
        (None, Some(_)) => Ok(Some(AdjustmentConfig::Oracle)),
        (None, None) if wanted => Ok(Some(AdjustmentConfig::CrossFitted {
            learner: OutcomeLearnerSpec::default(),
            folds: default_folds(),
        })),
        (None, None) => Ok(None),
    }
}

/// `Phi(x)` for a realised cohort.
fn phi(world: &World, r: &Realized, adj: AdjustmentConfig, p: f64, seed: &SeedSpec) -> Result<Vec<f64>> {
    match adj {
        AdjustmentConfig::Oracle => {
            let t = r.truth.as_ref().ok_or_else(|| HsdError::Config("oracle adjustment without truth".into()))?;
            Ok(hsd_core::estimation::oracle_adjustment(t, p))
        }
        AdjustmentConfig::CrossFitted { learner, folds } => {
            let frame = world.cohort_frame(r)?;
            Ok(CrossFittedAdjustment::fit(&frame, &learner, folds, seed)?.phi())
        }
    }
}

/// Repeatedly draws a uniform and an HS cohort of equal size, and records
/// every configured estimator and Qini curve on them.
pub fn run_evaluation_experiment(config: &EvaluationConfig) -> Result<EvaluationReport> {
    if !(config.treatment_p > 0.0 && config.treatment_p < 1.0) {
        return Err(HsdError::Config(format!("treatment_p {} outside (0,1)", config.treatment_p)));
    }
    let seed = SeedSpec::new(config.seed, "evaluation");
    let simulated = matches!(config.data, DataSource::Simulated { .. });
    let held = if simulated { 0 } else { config.sizes.uplift_training };
    let world = World::build(
        &config.data,
        &config.sizes,
        held,
        config.treatment_p,
        &config.outcome_learner,
        &config.plan,
        &seed.child("world"),
    )?;
    let adjustment = adjustment_for(&world, config)?;

    // one fixed uplift model, trained on a separate uniform RCT sample
    let train = match &config.data {
        DataSource::Simulated { scenario, n_features } => {
            let mut spec = scenario_spec(*scenario, *n_features, config.sizes.uplift_training, &seed.child("uplift_training"));
            spec.treatment_p = config.treatment_p;
            generate_scenario(&spec)?.0
        }
        DataSource::Csv { .. } => world.held_out.clone().ok_or_else(|| {
            HsdError::Config("sizes.uplift_training must be positive for CSV data".into())
        })?,
    };
    let model = fit_uplift(&config.uplift, &train, config.treatment_p, &seed.child("uplift"))?;
    let scores = predict_cate(&model, world.population.features())?;
    let truth_curve = match &world.truth {
        Some(t) => Some(truth_qini_curve(&scores, t.tau(), config.qini_grid)?),
        None => None,
    };
    let reference = Reference {
        scores: &scores,
        labels: &world.labels,
    };
    let p = config.treatment_p;

    let job = |r: usize| -> Result<EvalRep> {
        let rep = seed.indexed("rep", r as u64);
        let (u, h) = world.draw_pair(p, config.assignment, &rep)?;
        let phi_u = adjustment.map(|a| phi(&world, &u, a, p, &rep.child("phi_uniform"))).transpose()?;
        let phi_h = adjustment.map(|a| phi(&world, &h, a, p, &rep.child("phi_hs"))).transpose()?;
        let mut estimates = Vec::new();
        for &m in &config.estimators {
            let e = match m {
                Method::Dim => diff_in_means(&u.y, &u.w)?,
                Method::Stratified => {
                    stratified_ate(&u.y, &u.w, &u.cohort.strata, world.plan.effective_population_p_h())?
                }
                Method::Covadj | Method::OracleCovadj => match (adjustment, &u.truth) {
                    (Some(AdjustmentConfig::Oracle), Some(t)) => oracle_adjusted_ate(&u.y, &u.w, t, p)?,
                    (Some(AdjustmentConfig::CrossFitted { learner, folds }), _) => covariate_adjusted_ate(
                        &world.cohort_frame(&u)?,
                        &learner,
                        folds,
                        &rep.child("phi_uniform"),
                    )?,
                    _ => return Err(HsdError::Config("covariate adjustment unavailable".into())),
                },
                Method::Hs => hs_estimate(&h.y, &h.w, &h.cohort.strata, &world.plan, HsAdjustment::None)?,
                Method::HsCovadj => {
                    let adj = hsd_core::estimation::adjusted_outcomes(&h.y, phi_h.as_deref().expect("adjustment"));
                    let mut e = hsd_core::estimation::stratified_ate_real(
                        &adj,
                        &h.w,
                        &h.cohort.strata,
                        world.plan.effective_population_p_h(),
                    )?;
                    e.method = Method::HsCovadj;
                    e
                }
            };
            estimates.push(e);
        }
        let su: Vec<f64> = u.cohort.rows.iter().map(|&i| scores[i]).collect();
        let sh: Vec<f64> = h.cohort.rows.iter().map(|&i| scores[i]).collect();
        let iu = QiniInput::new(&u.y, &u.w, &su);
        let ih = QiniInput::new(&h.y, &h.w, &sh);
        let g = config.qini_grid;
        let mode = config.qini_mode;
        let none = qini_curve(&iu, g, mode)?;
        let covadj = match &phi_u {
            Some(a) => qini_curve(&iu.adjusted(a), g, mode)?,
            None => none.clone(),
        };
        let hs = hs_qini_curve(&ih, &h.cohort.strata, &reference, g, mode)?;
        let hs_covadj = match &phi_h {
            Some(a) => hs_qini_curve(&ih.adjusted(a), &h.cohort.strata, &reference, g, mode)?,
            None => hs.clone(),
        };
        let uncorrected = qini_curve(&ih, g, mode)?;
        Ok(EvalRep {
            estimates,
            curves: vec![none, covadj, hs, hs_covadj, uncorrected],
        })
    };
    let (reps, failed, first) = run_reps(config.repetitions, config.workers, job)?;

    let basis = config.variance_basis.unwrap_or(if simulated {
        VarianceBasis::Empirical
    } else {
        VarianceBasis::Analytic
    });
    let true_ate = world.truth.as_ref().map(|t| t.ate());
    let pick = |m: &Moments, vhat: f64| match basis {
        VarianceBasis::Empirical => m.variance,
        VarianceBasis::Analytic => vhat,
    };
    let mut summaries = Vec::new();
    for (k, &m) in config.estimators.iter().enumerate() {
        let vals: Vec<f64> = reps.iter().map(|r| r.estimates[k].value).collect();
        let vhat: Vec<f64> = reps.iter().map(|r| r.estimates[k].variance_hat).collect();
        let moments = Moments::of(&vals);
        summaries.push(EstimatorSummary {
            method: m,
            cohort: if matches!(m, Method::Hs | Method::HsCovadj) { "hs" } else { "uniform" },
            bias: true_ate.map(|a| moments.mean - a),
            mean_variance_hat: vhat.iter().sum::<f64>() / vhat.len() as f64,
            moments,
            variance_reduction_pct: None,
        });
    }
    if let Some(base) = summaries.iter().find(|s| s.method == Method::Dim).map(|s| pick(&s.moments, s.mean_variance_hat)) {
        for s in summaries.iter_mut() {
            s.variance_reduction_pct = Some(100.0 * (1.0 - pick(&s.moments, s.mean_variance_hat) / base));
        }
    }

    let mut qini = Vec::new();
    for (c, label) in QINI_LABELS.iter().enumerate() {
        let mut points = Vec::new();
        for j in 0..config.qini_grid {
            let qs: Vec<f64> = reps.iter().filter_map(|r| r.curves[c].points[j].q).collect();
            let vh: Vec<f64> = reps.iter().filter_map(|r| r.curves[c].points[j].variance_hat).collect();
            let t = reps.first().map(|r| r.curves[c].points[j].t).unwrap_or((j + 1) as f64 / config.qini_grid as f64);
            let m = (!qs.is_empty()).then(|| Moments::of(&qs));
            points.push(QiniPointSummary {
                t,
                present: qs.len(),
                mean_q: m.map(|m| m.mean),
                variance: m.map(|m| m.variance),
                mc_se: m.map(|m| m.mc_se),
                mean_variance_hat: (!vh.is_empty()).then(|| vh.iter().sum::<f64>() / vh.len() as f64 * t * t),
                truth_q: truth_curve.as_ref().map(|tc| tc[j].1),
                variance_reduction_pct: None,
            });
        }
        qini.push(QiniSummary { label, points });
    }
    let base: Vec<Option<f64>> = qini[0]
        .points
        .iter()
        .map(|p| match basis {
            VarianceBasis::Empirical => p.variance,
            VarianceBasis::Analytic => p.mean_variance_hat,
        })
        .collect();
    for s in qini.iter_mut() {
        for (p, b) in s.points.iter_mut().zip(&base) {
            let v = match basis {
                VarianceBasis::Empirical => p.variance,
                VarianceBasis::Analytic => p.mean_variance_hat,
            };
            p.variance_reduction_pct = match (v, b) {
                (Some(v), Some(b)) if *b > 0.0 => Some(100.0 * (1.0 - v / b)),
                _ => None,
            };
        }
    }

    Ok(EvaluationReport {
        pipeline: "evaluation",
        seed: config.seed,
        repetitions: config.repetitions,
        failed_repetitions: failed,
        first_failure: first,
        variance_basis: basis,
        plan: world.plan.clone(),
        true_ate,
        estimators: summaries,
        qini,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelGain {
    pub model: UpliftSpec,
    pub auq_estimator: &'static str,
    pub mean_auq_uniform: f64,
    pub mean_auq_hs: f64,
    /// Per-repetition `100 AUQ_HS / AUQ_uniform - 100`.
    pub gain_pct: Moments,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingReport {
    pub pipeline: &'static str,
    pub seed: u64,
    pub repetitions: usize,
    pub failed_repetitions: usize,
    pub first_failure: Option<String>,
    pub confidence_level: f64,
    pub plan: SamplingPlan,
    pub models: Vec<ModelGain>,
}

/// Trains each configured model on a uniform and on an HS cohort per
/// repetition and compares their AUQ on a shared test set.
pub fn run_training_experiment(config: &TrainingConfig) -> Result<TrainingReport> {
    if config.models.is_empty() {
        return Err(HsdError::Config("no models configured".into()));
    }
    if !(config.treatment_p > 0.0 && config.treatment_p < 1.0) {
        return Err(HsdError::Config(format!("treatment_p {} outside (0,1)", config.treatment_p)));
    }
    let seed = SeedSpec::new(config.seed, "training");
    let simulated = matches!(config.data, DataSource::Simulated { .. });
    let held = if simulated { 0 } else { config.sizes.test };
    let world = World::build(
        &config.data,
        &config.sizes,
        held,
        config.treatment_p,
        &config.outcome_learner,
        &config.plan,
        &seed.child("world"),
    )?;
    // shared test set: features plus known effects, or a held-out RCT sample
    let (test, test_truth) = match &config.data {
        DataSource::Simulated { scenario, n_features } => {
            let (f, t) = generate_population(&scenario_spec(*scenario, *n_features, config.sizes.test, &seed.child("test")))?;
            (f, Some(t))
        }
        DataSource::Csv { .. } => (
            world
                .held_out
                .clone()
                .ok_or_else(|| HsdError::Config("sizes.test must be positive for CSV data".into()))?,
            None,
        ),
    };
    let p = config.treatment_p;
    let auq = |scores: &[f64]| -> Result<f64> {
        Ok(match &test_truth {
            Some(t) => auq_oracle(scores, t.tau())?.value,
            None => auq_decile(
                &QiniInput::new(test.require_outcome()?, test.require_treatment()?, scores),
                config.auq_grid,
            )?
            .value,
        })
    };
    let job = |r: usize| -> Result<Vec<(f64, f64)>> {
        let rep = seed.indexed("rep", r as u64);
        let (u, h) = world.draw_pair(p, config.assignment, &rep)?;
        let fu = world.cohort_frame(&u)?;
        let fh = world.cohort_frame(&h)?;
        let mut out = Vec::with_capacity(config.models.len());
        for (k, spec) in config.models.iter().enumerate() {
            let mu = fit_uplift(spec, &fu, p, &rep.indexed("fit_uniform", k as u64))?;
            let mh = fit_uplift(spec, &fh, p, &rep.indexed("fit_hs", k as u64))?;
            let a_u = auq(&predict_cate(&mu, test.features())?)?;
            let a_h = auq(&predict_cate(&mh, test.features())?)?;
            out.push((a_u, a_h));
        }
        Ok(out)
    };
    let (reps, failed, first) = run_reps(config.repetitions, config.workers, job)?;
    let mut models = Vec::new();
    for (k, spec) in config.models.iter().enumerate() {
        let au: Vec<f64> = reps.iter().map(|r| r[k].0).collect();
        let ah: Vec<f64> = reps.iter().map(|r| r[k].1).collect();
        let gains: Vec<f64> = au.iter().zip(&ah).map(|(u, h)| 100.0 * h / u - 100.0).collect();
        let (lo, hi) = if gains.len() >= 2 {
            confidence_interval(&gains, config.confidence_level)?
        } else {
            (f64::NAN, f64::NAN)
        };
        models.push(ModelGain {
            model: *spec,
            auq_estimator: if test_truth.is_some() { "oracle_cdf" } else { "decile" },
            mean_auq_uniform: au.iter().sum::<f64>() / au.len() as f64,
            mean_auq_hs: ah.iter().sum::<f64>() / ah.len() as f64,
            gain_pct: Moments::of(&gains),
            ci_low: lo,
            ci_high: hi,
        });
    }
    Ok(TrainingReport {
        pipeline: "training",
        seed: config.seed,
        repetitions: config.repetitions,
        failed_repetitions: failed,
        first_failure: first,
        confidence_level: config.confidence_level,
        plan: world.plan.clone(),
        models,
    })
}
