//! Synthetic RCT scenarios with known effects, and the noisy-prediction
//! simulator used for the robustness sweep.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::design::{design_curve, select_plan, stratified_variance, DesignCurve};
use crate::error::{Error, Result};
use crate::frame::{FeatureMatrix, PopulationFrame, SimulatedTruth};
use crate::math::{exp, ln, mean, population_variance, powi, sigmoid};
use crate::rng::SeedSpec;

/// Rows generated from one derived seed.
pub const BLOCK_ROWS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "u8", into = "u8"))]
pub enum Scenario {
    One,
    Two,
    Three,
}

impl TryFrom<u8> for Scenario {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Scenario::One),
            2 => Ok(Scenario::Two),
            3 => Ok(Scenario::Three),
            _ => Err(Error::Validation(format!("unknown scenario {v}, expected 1, 2 or 3"))),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        match s {
            Scenario::One => 1,
            Scenario::Two => 2,
            Scenario::Three => 3,
        }
    }
}

impl Scenario {
    /// Baseline logit and treatment shift for one row (`x[0]` is `x1`).
    pub fn logits(self, x: &[f64]) -> (f64, f64) {
        match self {
            Scenario::One => (x[0] + 0.5 * x[1] + x[2] * x[3] - 4.0, 0.1),
            Scenario::Two => (x[0] * x[0] + 0.5 * x[1] + x[2] * x[3] - 7.0, 1.1 + x[4]),
            Scenario::Three => (
                0.1 * exp(x[0]) + 0.5 * powi(x[1], 3) + x[2] - 7.0,
                0.1 + x[4] * x[5],
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n_rows: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_n_features"))]
    pub n_features: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_treatment_p"))]
    pub treatment_p: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
}

fn default_n_features() -> usize {
    10
}

fn default_treatment_p() -> f64 {
    0.5
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, n_rows: usize, seed: u64) -> Self {
        Self {
            scenario,
            n_rows,
            n_features: default_n_features(),
            treatment_p: default_treatment_p(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features < 6 {
            return Err(Error::Validation(format!(
                "scenarios need at least 6 features, got {}",
                self.n_features
            )));
        }
        if self.n_rows == 0 {
            return Err(Error::Validation("n_rows must be positive".into()));
        }
        if !(self.treatment_p >= 0.0 && self.treatment_p <= 1.0) {
            return Err(Error::Validation(format!(
                "treatment proportion {} outside [0,1]",
                self.treatment_p
            )));
        }
        Ok(())
    }

    fn seed_spec(&self) -> SeedSpec {
        SeedSpec::new(self.seed, "scenario")
    }
}

pub fn feature_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// i.i.d. standard normal features, one derived stream per block of rows.
pub fn generate_features(n_rows: usize, n_features: usize, seed: &SeedSpec) -> Result<FeatureMatrix> {
    let mut data = Vec::with_capacity(n_rows * n_features);
    let stream = seed.child("features");
    let mut start = 0;
    let mut block = 0u64;
    while start < n_rows {
        let len = BLOCK_ROWS.min(n_rows - start);
        let mut rng = stream.rng_at(block);
        for _ in 0..len * n_features {
            data.push(StandardNormal.sample(&mut rng));
        }
        start += len;
        block += 1;
    }
    FeatureMatrix::new(feature_names(n_features), n_rows, data)
}

/// `mu0 = sigma(eta)`, `tau = sigma(eta + delta) - sigma(eta)` per row.
pub fn scenario_truth(scenario: Scenario, features: &FeatureMatrix) -> Result<SimulatedTruth> {
    if features.n_cols() < 6 {
        return Err(Error::Schema("scenario truth needs at least 6 feature columns".into()));
    }
    let n = features.n_rows();
    let mut mu0 = Vec::with_capacity(n);
    let mut tau = Vec::with_capacity(n);
    for i in 0..n {
        let (eta, delta) = scenario.logits(features.row(i));
        let m = sigmoid(eta);
        mu0.push(m);
        tau.push(sigmoid(eta + delta) - m);
    }
    SimulatedTruth::new(mu0, tau)
}

/// Bernoulli outcomes `y = 1{u < mu0 + w tau}` for a given assignment.
pub fn realize_outcomes(truth: &SimulatedTruth, treatment: &[u8], seed: &SeedSpec) -> Result<Vec<u8>> {
    if treatment.len() != truth.len() {
        return Err(Error::Schema(format!(
            "{} treatment flags for {} rows",
            treatment.len(),
            truth.len()
        )));
    }
    let stream = seed.child("outcomes");
    let mut y = Vec::with_capacity(truth.len());
    for (b, chunk) in (0..truth.len()).collect::<Vec<_>>().chunks(BLOCK_ROWS).enumerate() {
        let mut rng = stream.rng_at(b as u64);
        for &i in chunk {
            let p = truth.mu0()[i] + treatment[i] as f64 * truth.tau()[i];
            y.push((rng.random::<f64>() < p) as u8);
        }
    }
    Ok(y)
}

/// Bernoulli(`p`) assignment per row.
pub fn bernoulli_assignment(n_rows: usize, p: f64, seed: &SeedSpec) -> Vec<u8> {
    let stream = seed.child("assignment");
    let mut w = Vec::with_capacity(n_rows);
    let mut start = 0;
    let mut block = 0u64;
    while start < n_rows {
        let len = BLOCK_ROWS.min(n_rows - start);
        let mut rng = stream.rng_at(block);
        for _ in 0..len {
            w.push(rng.random_bool(p) as u8);
        }
        start += len;
        block += 1;
    }
    w
}

/// A simulated RCT: features, Bernoulli treatment, outcomes and truth.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<(PopulationFrame, SimulatedTruth)> {
    spec.validate()?;
    let seed = spec.seed_spec();
    let x = generate_features(spec.n_rows, spec.n_features, &seed)?;
    let truth = scenario_truth(spec.scenario, &x)?;
    let w = bernoulli_assignment(spec.n_rows, spec.treatment_p, &seed);
    let y = realize_outcomes(&truth, &w, &seed)?;
    let frame = PopulationFrame::new(x, Some(y), Some(w), None)?;
    Ok((frame, truth))
}

/// Features and truth without treatment or outcome (a customer base).
pub fn generate_population(spec: &ScenarioSpec) -> Result<(PopulationFrame, SimulatedTruth)> {
    spec.validate()?;
    let x = generate_features(spec.n_rows, spec.n_features, &spec.seed_spec())?;
    let truth = scenario_truth(spec.scenario, &x)?;
    Ok((PopulationFrame::new(x, None, None, None)?, truth))
}

/// Historical data under control only, used to fit the pre-experiment model.
pub fn generate_untreated(spec: &ScenarioSpec) -> Result<(PopulationFrame, SimulatedTruth)> {
    let (pop, truth) = generate_population(spec)?;
    let w = alloc::vec![0u8; spec.n_rows];
    let y = realize_outcomes(&truth, &w, &spec.seed_spec())?;
    Ok((pop.with_outcome(y)?, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AlphaMode {
    /// Raw Beta draws, `alpha = 1`.
    #[default]
    Overfit,
    /// Least-squares shrinkage toward the mean, `alpha = Cov(mu~, mu) / Var(mu~)`.
    Optimal,
}

/// What the robustness sweep's variance reduction is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Baseline {
    /// Difference in means on a completely random cohort.
    #[default]
    Random,
    /// Proportional stratified sampling on the same strata.
    Proportional,
}

const MU_FLOOR: f64 = 1e-9;

/// Noisy predictions `alpha mu~ + (1 - alpha) mean(mu)` with
/// `mu~ ~ Beta(nu mu, nu (1 - mu))`.
pub fn simulate_predictions(mu: &[f64], alpha_mode: AlphaMode, nu: f64, seed: &SeedSpec) -> Result<Vec<f64>> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::Validation(format!("nu must be positive, got {nu}")));
    }
    if mu.is_empty() {
        return Err(Error::Validation("no rows to simulate predictions for".into()));
    }
    let stream = seed.child("beta");
    let mut noisy = Vec::with_capacity(mu.len());
    for (b, chunk) in mu.chunks(BLOCK_ROWS).enumerate() {
        let mut rng = stream.rng_at(b as u64);
        for &m in chunk {
            let m = m.clamp(MU_FLOOR, 1.0 - MU_FLOOR);
            let draw = Beta::new(nu * m, nu * (1.0 - m))
                .map(|d| d.sample(&mut rng))
                .unwrap_or(m);
            noisy.push(if draw.is_finite() { draw } else { m });
        }
    }
    let mean_mu = mean(mu);
    let alpha = match alpha_mode {
        AlphaMode::Overfit => 1.0,
        AlphaMode::Optimal => {
            let mean_n = mean(&noisy);
            let var_n = population_variance(&noisy);
            if var_n > 0.0 {
                let cov = noisy
                    .iter()
                    .zip(mu)
                    .map(|(a, b)| (a - mean_n) * (b - mean_mu))
                    .sum::<f64>()
                    / mu.len() as f64;
                cov / var_n
            } else {
                0.0
            }
        }
    };
    Ok(noisy
        .iter()
        .map(|&v| alpha * v + (1.0 - alpha) * mean_mu)
        .collect())
}

/// `1 - MSE(pred, mu) / Var(mu)`.
pub fn accuracy_measure(predictions: &[f64], mu: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != mu.len() {
        return Err(Error::Schema("predictions and truth must be nonempty and aligned".into()));
    }
    let var = population_variance(mu);
    if !(var > 0.0) {
        return Err(Error::Validation("true outcome probabilities are constant".into()));
    }
    let mse = predictions
        .iter()
        .zip(mu)
        .map(|(p, m)| (p - m) * (p - m))
        .sum::<f64>()
        / mu.len() as f64;
    Ok(1.0 - mse / var)
}

/// `n` values from `lo` to `hi`, evenly spaced on a log scale.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return alloc::vec![lo];
    }
    let (a, b) = (ln(lo), ln(hi));
    (0..n)
        .map(|i| exp(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

pub fn default_nu_grid() -> Vec<f64> {
    log_grid(0.2, 200.0, 13)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RobustnessConfig {
    pub alpha_mode: AlphaMode,
    pub nu_grid: Vec<f64>,
    pub scenario: Scenario,
    pub n_rows: usize,
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub baseline: Baseline,
    /// Candidate `p_H` values; `None` uses the design default.
    #[cfg_attr(feature = "serde", serde(default))]
    pub p_h_grid: Option<Vec<f64>>,
}

impl RobustnessConfig {
    pub fn new(alpha_mode: AlphaMode, scenario: Scenario, n_rows: usize, seed: u64) -> Self {
        Self {
            alpha_mode,
            nu_grid: default_nu_grid(),
            scenario,
            n_rows,
            seed,
            baseline: Baseline::Random,
            p_h_grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nu_grid.is_empty() || self.nu_grid.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Validation("nu grid must hold positive finite values".into()));
        }
        if self.n_rows < 2 {
            return Err(Error::Validation("robustness sweep needs at least 2 rows".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RobustnessRow {
    pub nu: f64,
    pub accuracy: f64,
    pub vr_unadjusted: f64,
    pub vr_adjusted: f64,
}

/// Nominal cohort size used to turn the plan's ratio into stratum counts.
const SWEEP_COHORT: usize = 20_000;

/// True variance reduction of the plan chosen from `predictions`, judged with
/// the true control-outcome probabilities `mu`.
///
/// Stratum variances are `m_S (1 - m_S)` with `m_S` the stratum mean of `mu`.
/// When no plan can be built the design falls back to random sampling and
/// the reduction is 0.
pub fn actual_variance_reduction(
    predictions: &[f64],
    mu: &[f64],
    grid: &[f64],
    adjust: bool,
    baseline: Baseline,
) -> Result<f64> {
    let curve: DesignCurve = match design_curve(predictions, grid) {
        Ok(c) if !c.points.is_empty() => c,
        _ => return Ok(0.0),
    };
    let plan = match select_plan(&curve, SWEEP_COHORT, 0.5, adjust) {
        Ok(p) => p,
        Err(_) => return Ok(0.0),
    };
    let threshold = plan.effective_threshold();
    let (mut sum_h, mut n_h, mut sum_l, mut n_l) = (0.0, 0usize, 0.0, 0usize);
    for (&p, &m) in predictions.iter().zip(mu) {
        if p > threshold {
            sum_h += m;
            n_h += 1;
        } else {
            sum_l += m;
            n_l += 1;
        }
    }
    if n_h == 0 || n_l == 0 {
        return Ok(0.0);
    }
    let (m_h, m_l) = (sum_h / n_h as f64, sum_l / n_l as f64);
    let p_h = n_h as f64 / mu.len() as f64;
    let v_h = m_h * (1.0 - m_h);
    let v_l = m_l * (1.0 - m_l);
    let share = plan.n_high() as f64 / SWEEP_COHORT as f64;
    let design = stratified_variance(p_h, v_h, v_l, share);
    let base = match baseline {
        Baseline::Random => {
            let m = mean(mu);
            m * (1.0 - m)
        }
        Baseline::Proportional => stratified_variance(p_h, v_h, v_l, p_h),
    };
    Ok(1.0 - design / base)
}

/// For each `nu`: simulate predictions of `mu0`, build the plain and adjusted
/// plans, and report their true variance reductions.
pub fn robustness_sweep(config: &RobustnessConfig) -> Result<Vec<RobustnessRow>> {
    config.validate()?;
    let spec = ScenarioSpec::new(config.scenario, config.n_rows, config.seed);
    let (_, truth) = generate_population(&spec)?;
    robustness_sweep_on(truth.mu0(), config)
}

/// [`robustness_sweep`] on given true probabilities.
pub fn robustness_sweep_on(mu: &[f64], config: &RobustnessConfig) -> Result<Vec<RobustnessRow>> {
    config.validate()?;
    let grid = config
        .p_h_grid
        .clone()
        .unwrap_or_else(crate::design::default_grid);
    let seed = SeedSpec::new(config.seed, "robustness");
    let mut rows = Vec::with_capacity(config.nu_grid.len());
    for (j, &nu) in config.nu_grid.iter().enumerate() {
        let preds = simulate_predictions(mu, config.alpha_mode, nu, &seed.indexed("nu", j as u64))?;
        rows.push(RobustnessRow {
            nu,
            accuracy: accuracy_measure(&preds, mu)?,
            vr_unadjusted: actual_variance_reduction(&preds, mu, &grid, false, config.baseline)?,
            vr_adjusted: actual_variance_reduction(&preds, mu, &grid, true, config.baseline)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sqrt;

    #[test]
    fn all_zero_rows() {
        let x = [0.0; 6];
        let (eta, d) = Scenario::One.logits(&x);
        let mu0 = sigmoid(eta);
        assert!((mu0 - 0.0179862100).abs() < 1e-9);
        assert!((sigmoid(eta + d) - mu0 - (sigmoid(-3.9) - sigmoid(-4.0))).abs() < 1e-15);
        let (eta, d) = Scenario::Two.logits(&x);
        assert_eq!(eta, -7.0);
        assert_eq!(eta + d, -5.9);
        let (eta, d) = Scenario::Three.logits(&x);
        assert!((eta - (0.1 - 7.0)).abs() < 1e-15);
        assert_eq!(d, 0.1);
    }

    #[test]
    fn control_rate_matches_mu0() {
        let mut spec = ScenarioSpec::new(Scenario::One, 100_000, 17);
        spec.treatment_p = 0.0;
        let (frame, truth) = generate_scenario(&spec).unwrap();
        let y = frame.outcome().unwrap();
        let rate = y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
        let m = mean(truth.mu0());
        let se = sqrt(m * (1.0 - m) / y.len() as f64);
        assert!((rate - m).abs() < 4.0 * se, "rate {rate} vs {m}");
    }

    #[test]
    fn treated_rate_matches_truth() {
        for sc in [Scenario::One, Scenario::Two, Scenario::Three] {
            let mut spec = ScenarioSpec::new(sc, 60_000, 5);
            spec.treatment_p = 1.0;
            let (frame, truth) = generate_scenario(&spec).unwrap();
            let y = frame.outcome().unwrap();
            let rate = y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
            let p: Vec<f64> = truth.mu0().iter().zip(truth.tau()).map(|(a, b)| a + b).collect();
            let m = mean(&p);
            assert!((0.0..=1.0).contains(&m));
            let se = sqrt(m * (1.0 - m) / y.len() as f64);
            assert!((rate - m).abs() < 4.0 * se, "{sc:?}: rate {rate} vs {m}");
        }
    }

    #[test]
    fn generation_is_reproducible_and_seed_sensitive() {
        let spec = ScenarioSpec::new(Scenario::Two, 5_000, 3);
        let a = generate_scenario(&spec).unwrap();
        let b = generate_scenario(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&ScenarioSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a.0.features(), c.0.features());
    }

    #[test]
    fn too_few_features_rejected() {
        let spec = ScenarioSpec {
            n_features: 5,
            ..ScenarioSpec::new(Scenario::Three, 10, 0)
        };
        assert!(generate_scenario(&spec).is_err());
    }

    #[test]
    fn large_nu_concentrates() {
        let (_, truth) = generate_population(&ScenarioSpec::new(Scenario::One, 10_000, 2)).unwrap();
        let p = simulate_predictions(truth.mu0(), AlphaMode::Overfit, 1e6, &SeedSpec::new(1, "p")).unwrap();
        let mad = p.iter().zip(truth.mu0()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        assert!(mad < 0.01);
    }

    #[test]
    fn optimal_shrinkage_reduces_spread() {
        let (_, truth) = generate_population(&ScenarioSpec::new(Scenario::Three, 20_000, 2)).unwrap();
        for nu in default_nu_grid() {
            let seed = SeedSpec::new(3, "p");
            let raw = simulate_predictions(truth.mu0(), AlphaMode::Overfit, nu, &seed).unwrap();
            let opt = simulate_predictions(truth.mu0(), AlphaMode::Optimal, nu, &seed).unwrap();
            assert!(population_variance(&opt) <= population_variance(&raw) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn accuracy_reference_points() {
        let mu = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(accuracy_measure(&mu, &mu).unwrap(), 1.0);
        assert!(accuracy_measure(&[0.25; 4], &mu).unwrap().abs() < 1e-12);
        assert!(accuracy_measure(&[0.4, 0.3, 0.2, 0.1], &mu).unwrap() < 0.0);
        assert!(accuracy_measure(&[0.1; 4], &[0.2; 4]).is_err());
    }

    #[test]
    fn trivial_predictions_give_zero_reduction() {
        let (_, truth) = generate_population(&ScenarioSpec::new(Scenario::One, 5_000, 2)).unwrap();
        let m = mean(truth.mu0());
        let preds = alloc::vec![m; truth.len()];
        let grid = crate::design::default_grid();
        for adjust in [false, true] {
            let vr = actual_variance_reduction(&preds, truth.mu0(), &grid, adjust, Baseline::Random).unwrap();
            assert_eq!(vr, 0.0);
        }
    }

    #[test]
    fn perfect_predictions_reduce_variance() {
        let (_, truth) = generate_population(&ScenarioSpec::new(Scenario::Three, 50_000, 2)).unwrap();
        let grid = crate::design::default_grid();
        let mu = truth.mu0();
        let plain = actual_variance_reduction(mu, mu, &grid, false, Baseline::Random).unwrap();
        let adj = actual_variance_reduction(mu, mu, &grid, true, Baseline::Random).unwrap();
        assert!(adj >= 0.0);
        assert!(plain >= adj - 0.02, "plain {plain} adjusted {adj}");
    }

    #[test]
    fn log_grid_endpoints() {
        let g = default_nu_grid();
        assert!((g[0] - 0.2).abs() < 1e-12);
        assert!((g[g.len() - 1] - 200.0).abs() < 1e-9);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
