//! The `hsd` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hsd_core::design::{default_grid, design_curve, select_plan, SamplingPlan};
use hsd_core::estimation::{
    covariate_adjusted_ate, diff_in_means, hs_estimate_with_share, oracle_adjusted_ate, stratified_ate,
    HsAdjustment, Method,
};
use hsd_core::evaluation::{
    auq_decile, auq_oracle, downsample_reference, hs_auq_decile, hs_qini_curve, qini_curve, QiniInput,
    QiniMode, Reference,
};
use hsd_core::learners::{fit, predict_proba, OutcomeLearnerSpec};
use hsd_core::sampling::{
    assign_treatment_with, draw_cohort, draw_uniform, stratify_predictions, Assignment, Stratum,
};
use hsd_core::simulation::{
    default_nu_grid, generate_scenario, robustness_sweep, AlphaMode, Baseline, RobustnessConfig, Scenario,
    ScenarioSpec,
};
use hsd_core::uplift::{fit_uplift, predict_cate, UpliftModel, UpliftSpec};
use hsd_core::{FeatureMatrix, PopulationFrame, SeedSpec};

use crate::error::{HsdError, Result};
use crate::harness::{run_experiment, ExperimentConfig, PlanOptions};
use crate::io::{
    align_ids, load_csv, read_truth, write_cohort, write_design_curve, write_frame, write_qini_curve,
    write_robustness, write_scores, write_strata, write_truth, ColumnSchema, Table,
};

#[derive(Debug, Parser)]
#[command(name = "hsd", version, about = "Heteroskedasticity-aware stratified sampling for RCTs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for CSV and JSON artifacts.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the pre-experiment model and choose the stratification design.
    Plan {
        #[arg(long)]
        pre_experiment: PathBuf,
        #[arg(long)]
        population: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Draw a cohort from stratified population rows and assign treatment.
    Sample {
        /// CSV with `id` and either `stratum` or `prediction`.
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Draw uniformly instead of by the plan's strata.
        #[arg(long)]
        uniform: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the average treatment effect of a cohort.
    Estimate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit an uplift model and score a frame.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        /// Frame to score; defaults to the training cohort.
        #[arg(long)]
        score: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Qini curve and AUQ of scores on a test cohort.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        /// Plan of an HS cohort; enables the HS correction.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Population `id, score, stratum` used for HS thresholds; without it
        /// the cohort is down-sampled.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a scenario population with its true effects.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Variance reduction against prediction accuracy.
    Robustness {
        #[command(flatten)]
        common: Common,
    },
    /// Run a repeated-cohort experiment.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HsdError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HsdError::Json {
        path: path.display().to_string(),
        source: e,
    })
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn require_config<T: DeserializeOwned>(path: Option<&Path>, command: &str) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Err(HsdError::Config(format!("{command} needs --config"))),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| HsdError::Json {
        path: "<output>".into(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HsdError::io(dir, e))?;
    }
    let mut text = to_json(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HsdError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanCommandConfig {
    pub learner: OutcomeLearnerSpec,
    pub cohort_size: usize,
    pub treatment_p: f64,
    pub plan: PlanOptions,
    pub schema: Option<ColumnSchema>,
    pub seed: u64,
}

impl Default for PlanCommandConfig {
    fn default() -> Self {
        Self {
            learner: OutcomeLearnerSpec::default(),
            cohort_size: 20_000,
            treatment_p: 0.5,
            plan: PlanOptions::default(),
            schema: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleCommandConfig {
    /// Cohort size when drawing uniformly; HS draws use the plan's `n`.
    pub n: Option<usize>,
    pub assignment: Assignment,
    /// Leave treatment unassigned.
    pub skip_assignment: bool,
    pub seed: u64,
}

impl Default for SampleCommandConfig {
    fn default() -> Self {
        Self {
            n: None,
            assignment: Assignment::Pooled,
            skip_assignment: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateCommandConfig {
    /// Defaults to `hs` with a plan and `dim` otherwise.
    pub method: Option<Method>,
    pub treatment_p: f64,
    /// High-stratum population share; defaults to the plan's.
    pub population_p_h: Option<f64>,
    pub learner: OutcomeLearnerSpec,
    pub folds: usize,
    pub schema: Option<ColumnSchema>,
    pub seed: u64,
}

impl Default for EstimateCommandConfig {
    fn default() -> Self {
        Self {
            method: None,
            treatment_p: 0.5,
            population_p_h: None,
            learner: OutcomeLearnerSpec::default(),
            folds: 5,
            schema: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    #[serde(flatten)]
    pub model: UpliftSpec,
    #[serde(default = "half")]
    pub treatment_p: f64,
    #[serde(default)]
    pub schema: Option<ColumnSchema>,
    #[serde(default)]
    pub seed: u64,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateCommandConfig {
    pub grid: usize,
    pub auq_grid: usize,
    pub mode: QiniMode,
    pub seed: u64,
}

impl Default for EvaluateCommandConfig {
    fn default() -> Self {
        Self {
            grid: 10,
            auq_grid: 100,
            mode: QiniMode::Approximate,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateCommandConfig {
    pub scenario: Scenario,
    pub n_rows: usize,
    pub n_features: usize,
    pub treatment_p: f64,
    pub seed: u64,
}

impl Default for SimulateCommandConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::One,
            n_rows: 250_000,
            n_features: 10,
            treatment_p: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessCommandConfig {
    pub scenario: Scenario,
    pub n_rows: usize,
    pub alpha_modes: Vec<AlphaMode>,
    pub nu_grid: Vec<f64>,
    pub baseline: Baseline,
    pub p_h_grid: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for RobustnessCommandConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::One,
            n_rows: 250_000,
            alpha_modes: vec![AlphaMode::Overfit, AlphaMode::Optimal],
            nu_grid: default_nu_grid(),
            baseline: Baseline::Random,
            p_h_grid: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
struct EstimateOutput {
    method: Method,
    value: f64,
    variance_hat: f64,
    n: usize,
}

#[derive(Debug, Serialize)]
struct EvaluateOutput {
    correction: &'static str,
    reference_rows: usize,
    auq: f64,
    auq_estimator: &'static str,
    tie_fraction: f64,
    missing_points: usize,
}

/// Runs one command, writing the JSON result to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let json = match cli.command {
        Command::Plan {
            pre_experiment,
            population,
            common,
        } => plan(&pre_experiment, &population, &common)?,
        Command::Sample {
            population,
            plan,
            uniform,
            common,
        } => sample(&population, &plan, uniform, &common)?,
        Command::Estimate {
            cohort,
            truth,
            plan,
            common,
        } => estimate(&cohort, truth.as_deref(), plan.as_deref(), &common)?,
        Command::Train { cohort, score, common } => train(&cohort, score.as_deref(), &common)?,
        Command::Evaluate {
            scores,
            cohort,
            plan,
            reference,
            truth,
            common,
        } => evaluate(
            &scores,
            &cohort,
            plan.as_deref(),
            reference.as_deref(),
            truth.as_deref(),
            &common,
        )?,
        Command::Simulate { common } => simulate(&common)?,
        Command::Robustness { common } => robustness(&common)?,
        Command::Experiment { common } => experiment(&common)?,
    };
    writeln!(stdout, "{json}").map_err(|e| HsdError::io("<stdout>", e))?;
    eprintln!("runtime: {:.3}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn plan(pre: &Path, population: &Path, common: &Common) -> Result<String> {
    let mut cfg: PlanCommandConfig = config_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let pre = load_csv(pre, cfg.schema.as_ref())?;
    // pre-experiment outcomes must be untreated
    let pre = match pre.treatment() {
        Some(_) => pre.select(&pre.arm_rows(0)?),
        None => pre,
    };
    let pop = load_csv(population, cfg.schema.as_ref())?;
    let model = fit(
        &cfg.learner,
        pre.features(),
        pre.require_outcome()?,
        &SeedSpec::new(cfg.seed, "plan"),
    )?;
    let preds = predict_proba(&model, pop.features())?;
    let grid = cfg.plan.grid.clone().unwrap_or_else(default_grid);
    let curve = match cfg.plan.design_source {
        crate::harness::DesignSource::Population => design_curve(&preds, &grid)?,
        crate::harness::DesignSource::PreExperiment => {
            design_curve(&predict_proba(&model, pre.features())?, &grid)?
        }
    };
    let mut plan = select_plan(&curve, cfg.cohort_size, cfg.treatment_p, cfg.plan.adjust)?;
    let share = |t: f64| preds.iter().filter(|&&p| p > t).count() as f64 / preds.len() as f64;
    plan.population_p_h = share(plan.threshold);
    plan.population_p_h_adjusted = share(plan.threshold_adjusted);
    if let Some(r) = cfg.plan.oversampling_ratio {
        plan = plan.with_ratio(r);
    }
    let labels = stratify_predictions(&preds, plan.effective_threshold());
    write_design_curve(&common.out.join("design_curve.csv"), &curve)?;
    write_json(&common.out.join("plan.json"), &plan)?;
    write_strata(&common.out.join("strata.csv"), pop.ids(), &preds, &labels)?;
    to_json(&plan)
}

/// An id-only frame so the core samplers can carry ids through.
fn id_frame(ids: Vec<u64>) -> Result<PopulationFrame> {
    let n = ids.len();
    Ok(PopulationFrame::new(FeatureMatrix::new(vec![], n, vec![])?, None, None, Some(ids))?)
}

fn strata_of(table: &Table, plan: &SamplingPlan) -> Result<Vec<Stratum>> {
    if table.has("stratum") {
        table.stratum_column("stratum")
    } else if table.has("prediction") {
        Ok(stratify_predictions(&table.f64_column("prediction")?, plan.effective_threshold()))
    } else {
        Err(HsdError::Data("need a `stratum` or `prediction` column".into()))
    }
}

fn sample(population: &Path, plan_path: &Path, uniform: bool, common: &Common) -> Result<String> {
    let mut cfg: SampleCommandConfig = config_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let plan: SamplingPlan = read_json(plan_path)?;
    let table = Table::read(population)?;
    let labels = strata_of(&table, &plan)?;
    let pop = id_frame(table.u64_column("id")?)?;
    let seed = SeedSpec::new(cfg.seed, "sample");
    let mut cohort = if uniform {
        draw_uniform(&pop, &labels, cfg.n.unwrap_or(plan.n), &seed.child("draw"))?
    } else {
        draw_cohort(&pop, &labels, &plan, &seed.child("draw"))?
    };
    if !cfg.skip_assignment {
        cohort = assign_treatment_with(&cohort, plan.treatment_p, cfg.assignment, &seed.child("assign"))?;
    }
    write_cohort(&common.out.join("cohort.csv"), &cohort)?;
    to_json(&serde_json::json!({
        "design": if uniform { "uniform" } else { "hs" },
        "n": cohort.len(),
        "n_high": cohort.count(Stratum::High),
        "n_low": cohort.count(Stratum::Low),
        "n_treated": cohort.treatment.as_ref().map(|w| w.iter().filter(|&&v| v == 1).count()),
    }))
}

fn estimate(cohort: &Path, truth: Option<&Path>, plan: Option<&Path>, common: &Common) -> Result<String> {
    let mut cfg: EstimateCommandConfig = config_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let plan: Option<SamplingPlan> = plan.map(read_json).transpose()?;
    let table = Table::read(cohort)?;
    let frame = table.to_frame(cfg.schema.as_ref())?;
    let y = frame.require_outcome()?;
    let w = frame.require_treatment()?;
    let method = cfg
        .method
        .unwrap_or(if plan.is_some() { Method::Hs } else { Method::Dim });
    let labels = || -> Result<Vec<Stratum>> {
        if table.has("stratum") {
            table.stratum_column("stratum")
        } else {
            Err(HsdError::Data(format!("{} needs a `stratum` column", method.as_str())))
        }
    };
    let p_h = || -> Result<f64> {
        cfg.population_p_h
            .or(plan.as_ref().map(|p| p.effective_population_p_h()))
            .ok_or_else(|| HsdError::Config("stratified estimates need --plan or population_p_h".into()))
    };
    let truth = match truth {
        Some(path) => {
            let (ids, t) = read_truth(path)?;
            Some(t.select(&align_ids(&ids, frame.ids(), "truth")?))
        }
        None => None,
    };
    let seed = SeedSpec::new(cfg.seed, "estimate");
    let cross = HsAdjustment::CrossFitted {
        frame: &frame,
        spec: &cfg.learner,
        k: cfg.folds,
        seed: &seed,
    };
    let e = match method {
        Method::Dim => diff_in_means(y, w)?,
        Method::Stratified => stratified_ate(y, w, &labels()?, p_h()?)?,
        Method::OracleCovadj => {
            let t = truth
                .as_ref()
                .ok_or_else(|| HsdError::Config("oracle_covadj needs --truth".into()))?;
            oracle_adjusted_ate(y, w, t, cfg.treatment_p)?
        }
        Method::Covadj => match &truth {
            Some(t) => oracle_adjusted_ate(y, w, t, cfg.treatment_p)?,
            None => covariate_adjusted_ate(&frame, &cfg.learner, cfg.folds, &seed)?,
        },
        Method::Hs => hs_estimate_with_share(y, w, &labels()?, p_h()?, HsAdjustment::None)?,
        Method::HsCovadj => {
            let adj = match &truth {
                Some(t) => HsAdjustment::Oracle {
                    truth: t,
                    p: cfg.treatment_p,
                },
                None => cross,
            };
            hs_estimate_with_share(y, w, &labels()?, p_h()?, adj)?
        }
    };
    to_json(&EstimateOutput {
        method: e.method,
        value: e.value,
        variance_hat: e.variance_hat,
        n: e.n_used,
    })
}

fn train(cohort: &Path, score: Option<&Path>, common: &Common) -> Result<String> {
    let mut cfg: TrainCommandConfig = require_config(common.config.as_deref(), "train")?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let frame = load_csv(cohort, cfg.schema.as_ref())?;
    let model = fit_uplift(&cfg.model, &frame, cfg.treatment_p, &SeedSpec::new(cfg.seed, "train"))?;
    let target = match score {
        Some(p) => load_csv(p, cfg.schema.as_ref())?,
        None => frame,
    };
    let scores = predict_cate(&model, target.features())?;
    write_json(&common.out.join("model.json"), &model)?;
    write_scores(&common.out.join("scores.csv"), target.ids(), &scores)?;
    to_json(&serde_json::json!({
        "meta": cfg.model.meta,
        "rows_scored": scores.len(),
    }))
}

/// Loads a saved model, for callers that score outside `train`.
pub fn load_model(path: &Path) -> Result<UpliftModel> {
    read_json(path)
}

fn evaluate(
    scores_path: &Path,
    cohort: &Path,
    plan: Option<&Path>,
    reference: Option<&Path>,
    truth: Option<&Path>,
    common: &Common,
) -> Result<String> {
    let mut cfg: EvaluateCommandConfig = config_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let table = Table::read(cohort)?;
    let ids = table.u64_column("id")?;
    let y = table.binary_column(if table.has("y") { "y" } else { "outcome" })?;
    let w = table.binary_column(if table.has("w") { "w" } else { "treatment" })?;
    let st = Table::read(scores_path)?;
    let rows = align_ids(&st.u64_column("id")?, &ids, "scores")?;
    let all_scores = st.f64_column("score")?;
    let scores: Vec<f64> = rows.iter().map(|&i| all_scores[i]).collect();
    let input = QiniInput::new(&y, &w, &scores);
    let plan: Option<SamplingPlan> = plan.map(read_json).transpose()?;

    let (curve, auq, reference_rows, correction) = match &plan {
        None => {
            let curve = qini_curve(&input, cfg.grid, cfg.mode)?;
            let auq = match truth {
                Some(_) => None,
                None => Some(auq_decile(&input, cfg.auq_grid)?.value),
            };
            (curve, auq, 0, "none")
        }
        Some(plan) => {
            let labels = strata_of(&table, plan)?;
            let (ref_scores, ref_labels) = match reference {
                Some(p) => {
                    let r = Table::read(p)?;
                    (r.f64_column("score")?, r.stratum_column("stratum")?)
                }
                None => {
                    let keep = downsample_reference(
                        &labels,
                        plan.effective_population_p_h(),
                        &SeedSpec::new(cfg.seed, "reference"),
                    )?;
                    (
                        keep.iter().map(|&i| scores[i]).collect(),
                        keep.iter().map(|&i| labels[i]).collect(),
                    )
                }
            };
            let reference = Reference {
                scores: &ref_scores,
                labels: &ref_labels,
            };
            let curve = hs_qini_curve(&input, &labels, &reference, cfg.grid, cfg.mode)?;
            let auq = match truth {
                Some(_) => None,
                None => Some(hs_auq_decile(&input, &labels, &reference, cfg.auq_grid)?.value),
            };
            (curve, auq, ref_scores.len(), "hs")
        }
    };
    let (auq, estimator) = match (auq, truth) {
        (Some(a), _) => (a, "decile"),
        (None, Some(path)) => {
            let (tids, t) = read_truth(path)?;
            let t = t.select(&align_ids(&tids, &ids, "truth")?);
            (auq_oracle(&scores, t.tau())?.value, "oracle_cdf")
        }
        (None, None) => unreachable!("decile AUQ computed without truth"),
    };
    write_qini_curve(&common.out.join("curve.csv"), &curve)?;
    to_json(&EvaluateOutput {
        correction,
        reference_rows,
        auq,
        auq_estimator: estimator,
        tie_fraction: curve.tie_fraction,
        missing_points: curve.n_missing(),
    })
}

fn simulate(common: &Common) -> Result<String> {
    let mut cfg: SimulateCommandConfig = config_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let spec = ScenarioSpec {
        scenario: cfg.scenario,
        n_rows: cfg.n_rows,
        n_features: cfg.n_features,
        treatment_p: cfg.treatment_p,
        seed: cfg.seed,
    };
    let (frame, truth) = generate_scenario(&spec)?;
    write_frame(&common.out.join("population.csv"), &frame)?;
    write_truth(&common.out.join("truth.csv"), frame.ids(), &truth)?;
    to_json(&serde_json::json!({
        "scenario": cfg.scenario,
        "n_rows": frame.n_rows(),
        "true_ate": truth.ate(),
        "outcome_rate": frame.outcome_f64()?.iter().sum::<f64>() / frame.n_rows() as f64,
    }))
}

fn robustness(common: &Common) -> Result<String> {
    let mut cfg: RobustnessCommandConfig = config_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let mut out = serde_json::Map::new();
    for mode in &cfg.alpha_modes {
        let rc = RobustnessConfig {
            alpha_mode: *mode,
            nu_grid: cfg.nu_grid.clone(),
            scenario: cfg.scenario,
            n_rows: cfg.n_rows,
            seed: cfg.seed,
            baseline: cfg.baseline,
            p_h_grid: cfg.p_h_grid.clone(),
        };
        let rows = robustness_sweep(&rc)?;
        let name = match mode {
            AlphaMode::Overfit => "overfit",
            AlphaMode::Optimal => "optimal",
        };
        write_robustness(&common.out.join(format!("robustness_{name}.csv")), &rows)?;
        out.insert(
            name.into(),
            serde_json::to_value(&rows).map_err(|e| HsdError::Json {
                path: "<output>".into(),
                source: e,
            })?,
        );
    }
    to_json(&out)
}

fn experiment(common: &Common) -> Result<String> {
    let mut cfg: ExperimentConfig = require_config(common.config.as_deref(), "experiment")?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    let report = run_experiment(&cfg)?;
    write_json(&common.out.join("report.json"), &report)?;
    to_json(&report)
}
