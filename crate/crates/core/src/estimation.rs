//! ATE estimators and their variance estimates.

use alloc::format;
use alloc::vec::Vec;

use crate::design::SamplingPlan;
use crate::error::{Error, Result};
use crate::frame::{PopulationFrame, SimulatedTruth};
use crate::learners::{cross_fit_predictions, OutcomeLearnerSpec};
use crate::rng::SeedSpec;
use crate::sampling::Stratum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    Dim,
    Stratified,
    Covadj,
    OracleCovadj,
    Hs,
    HsCovadj,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dim => "dim",
            Method::Stratified => "stratified",
            Method::Covadj => "covadj",
            Method::OracleCovadj => "oracle_covadj",
            Method::Hs => "hs",
            Method::HsCovadj => "hs_covadj",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AteEstimate {
    pub method: Method,
    pub value: f64,
    pub variance_hat: f64,
    pub n_used: usize,
    pub n_treated: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VarianceDecomposition {
    pub zeta_var_over_n: f64,
    pub eps_bar_var_over_n: f64,
    pub total: f64,
}

/// Difference in means over the rows where `include` holds, summed in row order.
///
/// Returns `(value, variance_hat, n_treated, n_control)`; arm variances use
/// `n - 1` denominators and are 0 for single-row arms.
pub(crate) fn masked_dim(
    y: &[f64],
    w: &[u8],
    include: impl Fn(usize) -> bool,
) -> (f64, f64, usize, usize) {
    let (mut s1, mut s0, mut n1, mut n0) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..y.len() {
        if include(i) {
            if w[i] == 1 {
                s1 += y[i];
                n1 += 1;
            } else {
                s0 += y[i];
                n0 += 1;
            }
        }
    }
    let m1 = s1 / n1 as f64;
    let m0 = s0 / n0 as f64;
    let (mut q1, mut q0) = (0.0, 0.0);
    for i in 0..y.len() {
        if include(i) {
            if w[i] == 1 {
                q1 += (y[i] - m1) * (y[i] - m1);
            } else {
                q0 += (y[i] - m0) * (y[i] - m0);
            }
        }
    }
    let v1 = if n1 > 1 { q1 / (n1 - 1) as f64 / n1 as f64 } else { 0.0 };
    let v0 = if n0 > 1 { q0 / (n0 - 1) as f64 / n0 as f64 } else { 0.0 };
    (m1 - m0, v1 + v0, n1, n0)
}

/// Stratum-weighted combination of [`masked_dim`]; a stratum with weight 0 is
/// skipped. Fails with the first empty stratum-arm cell.
pub(crate) fn masked_stratified(
    y: &[f64],
    w: &[u8],
    labels: &[Stratum],
    p_h: f64,
    include: impl Fn(usize) -> bool,
) -> core::result::Result<(f64, f64, usize, usize), (Stratum, &'static str)> {
    let mut value = 0.0;
    let mut variance_hat = 0.0;
    let mut n_used = 0;
    let mut n_treated = 0;
    for (stratum, weight) in [(Stratum::High, p_h), (Stratum::Low, 1.0 - p_h)] {
        if weight == 0.0 {
            continue;
        }
        let (v, var, n1, n0) = masked_dim(y, w, |i| labels[i] == stratum && include(i));
        if n1 == 0 {
            return Err((stratum, "treated"));
        }
        if n0 == 0 {
            return Err((stratum, "control"));
        }
        value += weight * v;
        variance_hat += weight * weight * var;
        n_used += n1 + n0;
        n_treated += n1;
    }
    Ok((value, variance_hat, n_used, n_treated))
}

fn check_lengths(y: usize, w: usize) -> Result<()> {
    if y != w {
        return Err(Error::Schema(format!("{y} outcomes but {w} treatment flags")));
    }
    Ok(())
}

fn to_f64(y: &[u8]) -> Vec<f64> {
    y.iter().map(|&v| v as f64).collect()
}

pub fn diff_in_means(outcome: &[u8], treatment: &[u8]) -> Result<AteEstimate> {
    diff_in_means_real(&to_f64(outcome), treatment)
}

/// Difference in means on real-valued (for example adjusted) outcomes.
pub fn diff_in_means_real(outcome: &[f64], treatment: &[u8]) -> Result<AteEstimate> {
    check_lengths(outcome.len(), treatment.len())?;
    let (value, variance_hat, n1, n0) = masked_dim(outcome, treatment, |_| true);
    if n1 == 0 {
        return Err(Error::EmptyArm("no treated rows".into()));
    }
    if n0 == 0 {
        return Err(Error::EmptyArm("no control rows".into()));
    }
    Ok(AteEstimate {
        method: Method::Dim,
        value,
        variance_hat,
        n_used: n1 + n0,
        n_treated: n1,
    })
}

pub fn stratified_ate(
    outcome: &[u8],
    treatment: &[u8],
    labels: &[Stratum],
    population_p_h: f64,
) -> Result<AteEstimate> {
    stratified_ate_real(&to_f64(outcome), treatment, labels, population_p_h)
}

/// Population-weighted combination of per-stratum differences in means.
///
/// A stratum with zero population weight is ignored entirely.
pub fn stratified_ate_real(
    outcome: &[f64],
    treatment: &[u8],
    labels: &[Stratum],
    population_p_h: f64,
) -> Result<AteEstimate> {
    check_lengths(outcome.len(), treatment.len())?;
    check_lengths(outcome.len(), labels.len())?;
    if !(0.0..=1.0).contains(&population_p_h) {
        return Err(Error::Validation(format!(
            "population p_H = {population_p_h} outside [0,1]"
        )));
    }
    let (value, variance_hat, n_used, n_treated) =
        masked_stratified(outcome, treatment, labels, population_p_h, |_| true).map_err(
            |(stratum, arm)| {
                Error::EmptyArm(format!("stratum {} has no {arm} rows", stratum.as_str()))
            },
        )?;
    Ok(AteEstimate {
        method: Method::Stratified,
        value,
        variance_hat,
        n_used,
        n_treated,
    })
}

/// `Phi(x) = mu_x + (1 - p) tau_x`, the adjustment with the smallest variance.
pub fn oracle_adjustment(truth: &SimulatedTruth, p: f64) -> Vec<f64> {
    truth
        .mu0()
        .iter()
        .zip(truth.tau())
        .map(|(&m, &t)| m + (1.0 - p) * t)
        .collect()
}

pub fn adjusted_outcomes(outcome: &[u8], adjustment: &[f64]) -> Vec<f64> {
    outcome
        .iter()
        .zip(adjustment)
        .map(|(&y, &a)| y as f64 - a)
        .collect()
}

pub fn oracle_adjusted_ate(
    outcome: &[u8],
    treatment: &[u8],
    truth: &SimulatedTruth,
    p: f64,
) -> Result<AteEstimate> {
    check_lengths(outcome.len(), truth.len())?;
    let adj = adjusted_outcomes(outcome, &oracle_adjustment(truth, p));
    let mut est = diff_in_means_real(&adj, treatment)?;
    est.method = Method::OracleCovadj;
    Ok(est)
}

/// Cross-fitted nuisance predictions and the adjustment built from them.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFittedAdjustment {
    pub mu0_hat: Vec<f64>,
    pub mu1_hat: Vec<f64>,
    pub folds: Vec<usize>,
    pub k: usize,
    /// Realised treated share of the frame.
    pub p: f64,
}

impl CrossFittedAdjustment {
    pub fn fit(
        frame: &PopulationFrame,
        spec: &OutcomeLearnerSpec,
        k: usize,
        seed: &SeedSpec,
    ) -> Result<Self> {
        let w = frame.require_treatment()?;
        frame.require_outcome()?;
        let cf = cross_fit_predictions(spec, frame, k, true, seed)?;
        let p = w.iter().filter(|&&v| v == 1).count() as f64 / w.len() as f64;
        Ok(Self {
            mu0_hat: cf.mu0_hat,
            mu1_hat: cf.mu1_hat,
            folds: cf.folds,
            k,
            p,
        })
    }

    /// `Phi_hat(x) = p mu0_hat(x) + (1 - p) mu1_hat(x)`.
    pub fn phi(&self) -> Vec<f64> {
        self.mu0_hat
            .iter()
            .zip(&self.mu1_hat)
            .map(|(&m0, &m1)| self.p * m0 + (1.0 - self.p) * m1)
            .collect()
    }

    /// Average of the per-fold doubly robust estimates.
    pub fn fold_average(&self, outcome: &[u8], treatment: &[u8]) -> Result<f64> {
        let mut total = 0.0;
        for fold in 0..self.k {
            let (mut pred, mut n) = (0.0, 0usize);
            let (mut r1, mut n1, mut r0, mut n0) = (0.0, 0usize, 0.0, 0usize);
            for i in 0..outcome.len() {
                if self.folds[i] != fold {
                    continue;
                }
                pred += self.mu1_hat[i] - self.mu0_hat[i];
                n += 1;
                let y = outcome[i] as f64;
                if treatment[i] == 1 {
                    r1 += y - self.mu1_hat[i];
                    n1 += 1;
                } else {
                    r0 += y - self.mu0_hat[i];
                    n0 += 1;
                }
            }
            if n1 == 0 {
                return Err(Error::FoldMissingArm { fold, arm: "treated" });
            }
            if n0 == 0 {
                return Err(Error::FoldMissingArm { fold, arm: "control" });
            }
            total += pred / n as f64 + r1 / n1 as f64 - r0 / n0 as f64;
        }
        Ok(total / self.k as f64)
    }
}

/// Cross-fitted covariate-adjusted estimator with `k` folds.
pub fn covariate_adjusted_ate(
    frame: &PopulationFrame,
    spec: &OutcomeLearnerSpec,
    k: usize,
    seed: &SeedSpec,
) -> Result<AteEstimate> {
    let adj = CrossFittedAdjustment::fit(frame, spec, k, seed)?;
    let y = frame.require_outcome()?;
    let w = frame.require_treatment()?;
    let value = adj.fold_average(y, w)?;
    let mut est = diff_in_means_real(&adjusted_outcomes(y, &adj.phi()), w)?;
    est.value = value;
    est.method = Method::Covadj;
    Ok(est)
}

/// How `hs_estimate` adjusts outcomes before stratifying.
#[derive(Debug, Clone, Copy)]
pub enum HsAdjustment<'a> {
    None,
    Oracle { truth: &'a SimulatedTruth, p: f64 },
    CrossFitted {
        frame: &'a PopulationFrame,
        spec: &'a OutcomeLearnerSpec,
        k: usize,
        seed: &'a SeedSpec,
    },
}

/// Stratified estimator weighted by the plan's population share, optionally
/// on adjusted outcomes.
pub fn hs_estimate(
    outcome: &[u8],
    treatment: &[u8],
    labels: &[Stratum],
    plan: &SamplingPlan,
    adjustment: HsAdjustment<'_>,
) -> Result<AteEstimate> {
    hs_estimate_with_share(
        outcome,
        treatment,
        labels,
        plan.effective_population_p_h(),
        adjustment,
    )
}

pub fn hs_estimate_with_share(
    outcome: &[u8],
    treatment: &[u8],
    labels: &[Stratum],
    population_p_h: f64,
    adjustment: HsAdjustment<'_>,
) -> Result<AteEstimate> {
    let (y, method) = match adjustment {
        HsAdjustment::None => (to_f64(outcome), Method::Hs),
        HsAdjustment::Oracle { truth, p } => {
            check_lengths(outcome.len(), truth.len())?;
            (adjusted_outcomes(outcome, &oracle_adjustment(truth, p)), Method::HsCovadj)
        }
        HsAdjustment::CrossFitted { frame, spec, k, seed } => {
            check_lengths(outcome.len(), frame.n_rows())?;
            let adj = CrossFittedAdjustment::fit(frame, spec, k, seed)?;
            (adjusted_outcomes(outcome, &adj.phi()), Method::HsCovadj)
        }
    };
    let mut est = stratified_ate_real(&y, treatment, labels, population_p_h)?;
    est.method = method;
    Ok(est)
}

/// Splits the estimator's variance into the signal part (`zeta`) and the
/// noise part (`eps_bar`), using sample variances scaled by `1/N`.
pub fn variance_decomposition(
    truth: &SimulatedTruth,
    outcome: &[u8],
    treatment: &[u8],
    p: f64,
) -> Result<VarianceDecomposition> {
    check_lengths(outcome.len(), treatment.len())?;
    check_lengths(outcome.len(), truth.len())?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Validation(format!("treatment proportion {p} outside (0,1)")));
    }
    let n = outcome.len();
    let mut zeta = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for i in 0..n {
        let wi = treatment[i] as f64;
        let weight = if treatment[i] == 1 { 1.0 / p } else { -1.0 / (1.0 - p) };
        let signal = truth.mu0()[i] + wi * truth.tau()[i];
        zeta.push(weight * signal);
        eps.push(weight * (outcome[i] as f64 - signal));
    }
    let zeta_var_over_n = crate::math::sample_variance(&zeta) / n as f64;
    let eps_bar_var_over_n = crate::math::sample_variance(&eps) / n as f64;
    Ok(VarianceDecomposition {
        zeta_var_over_n,
        eps_bar_var_over_n,
        total: zeta_var_over_n + eps_bar_var_over_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::FeatureMatrix;
    use alloc::string::String;
    use alloc::vec;
    use rand::Rng as _;

    #[test]
    fn dim_hand_cases() {
        let e = diff_in_means(&[1, 0, 1, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!(e.value, 0.0);
        let e = diff_in_means(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!(e.value, 1.0);
        assert_eq!(e.variance_hat, 0.0);
        assert_eq!(e.n_treated, 2);
        // s1^2 = 1/3, s0^2 = 0 -> 1/3 / 3
        let e = diff_in_means(&[1, 1, 0, 0, 0], &[1, 1, 1, 0, 0]).unwrap();
        assert!((e.value - 2.0 / 3.0).abs() < 1e-15);
        assert!((e.variance_hat - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn dim_empty_arm() {
        assert!(matches!(diff_in_means(&[1, 0], &[1, 1]), Err(Error::EmptyArm(_))));
        assert!(matches!(diff_in_means(&[1, 0], &[0, 0]), Err(Error::EmptyArm(_))));
    }

    #[test]
    fn dim_bernoulli_draws() {
        let mut rng = SeedSpec::new(11, "bern").rng();
        let n = 10_000;
        let w: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y: Vec<u8> = w
            .iter()
            .map(|&wi| rng.random_bool(if wi == 1 { 0.12 } else { 0.10 }) as u8)
            .collect();
        let e = diff_in_means(&y, &w).unwrap();
        assert!((e.value - 0.02).abs() < 4.0 * e.variance_hat.sqrt());
    }

    #[test]
    fn stratified_hand_case() {
        // H: treated 2/5, control 1/10 -> 0.3 ; L: treated 1/5, control 1/10 -> 0.1
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut lab = Vec::new();
        let mut push = |s: Stratum, arm: u8, ones: usize, total: usize| {
            for j in 0..total {
                y.push((j < ones) as u8);
                w.push(arm);
                lab.push(s);
            }
        };
        push(Stratum::High, 1, 4, 10);
        push(Stratum::High, 0, 1, 10);
        push(Stratum::Low, 1, 2, 10);
        push(Stratum::Low, 0, 1, 10);
        let e = stratified_ate(&y, &w, &lab, 0.25).unwrap();
        assert!((e.value - 0.15).abs() < 1e-12);
    }

    #[test]
    fn single_stratum_matches_dim() {
        let y = [1, 0, 1, 1, 0, 0, 1];
        let w = [1, 1, 1, 0, 0, 0, 0];
        let lab = [Stratum::Low; 7];
        let s = stratified_ate(&y, &w, &lab, 0.0).unwrap();
        let d = diff_in_means(&y, &w).unwrap();
        assert_eq!(s.value, d.value);
        assert_eq!(s.variance_hat, d.variance_hat);
    }

    #[test]
    fn stratified_names_empty_cell() {
        let y = [1, 0, 1, 0];
        let w = [1, 1, 1, 0];
        let lab = [Stratum::High, Stratum::High, Stratum::Low, Stratum::Low];
        match stratified_ate(&y, &w, &lab, 0.5) {
            Err(Error::EmptyArm(msg)) => assert!(msg.contains("stratum H")),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn oracle_with_constant_truth_matches_dim() {
        let y = [1, 0, 1, 1, 0, 0, 1, 0];
        let w = [1, 1, 1, 1, 0, 0, 0, 0];
        let truth = SimulatedTruth::new(vec![0.3; 8], vec![0.0; 8]).unwrap();
        let o = oracle_adjusted_ate(&y, &w, &truth, 0.5).unwrap();
        let d = diff_in_means(&y, &w).unwrap();
        assert!((o.value - d.value).abs() < 1e-15);
        assert!((o.variance_hat - d.variance_hat).abs() < 1e-15);
    }

    #[test]
    fn oracle_removes_deterministic_outcomes() {
        // y = mu + w tau exactly, so y - Phi = w p tau ... constant within arms
        let mu0 = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let tau = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let truth = SimulatedTruth::new(mu0.clone(), tau.clone()).unwrap();
        let w = [1, 1, 0, 0, 1, 1, 0, 0];
        let y: Vec<u8> = (0..8).map(|i| (mu0[i] + w[i] as f64 * tau[i]) as u8).collect();
        let e = oracle_adjusted_ate(&y, &w, &truth, 0.5).unwrap();
        assert!((e.value - 0.5).abs() < 1e-15);
        let d = diff_in_means(&y, &w).unwrap();
        assert!(d.variance_hat > 0.0);
    }

    fn constant_frame(n: usize, seed: u64) -> PopulationFrame {
        let mut rng = SeedSpec::new(seed, "frame").rng();
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
        let w: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let fm = FeatureMatrix::new(vec![String::from("x")], n, x).unwrap();
        PopulationFrame::new(fm, Some(y), Some(w), None).unwrap()
    }

    #[test]
    fn constant_learner_adjustment_cancels() {
        // a leaf that can never split predicts a constant per fold,
        // which cancels in the fold estimate
        let frame = constant_frame(1000, 4);
        let spec = OutcomeLearnerSpec::RandomForest(crate::learners::ForestParams {
            n_trees: 1,
            min_leaf: 10_000,
            ..Default::default()
        });
        let ca = covariate_adjusted_ate(&frame, &spec, 5, &SeedSpec::new(1, "ca")).unwrap();
        let d = diff_in_means(frame.outcome().unwrap(), frame.treatment().unwrap()).unwrap();
        assert!((ca.value - d.value).abs() < 1e-12, "{} vs {}", ca.value, d.value);
        assert_eq!(ca.method, Method::Covadj);
    }

    #[test]
    fn hs_plain_is_stratified() {
        let y = [1, 0, 1, 1, 0, 0, 1, 0];
        let w = [1, 0, 1, 0, 1, 0, 1, 0];
        let lab = [
            Stratum::High,
            Stratum::High,
            Stratum::High,
            Stratum::High,
            Stratum::Low,
            Stratum::Low,
            Stratum::Low,
            Stratum::Low,
        ];
        let s = stratified_ate(&y, &w, &lab, 0.1).unwrap();
        let h = hs_estimate_with_share(&y, &w, &lab, 0.1, HsAdjustment::None).unwrap();
        assert_eq!(s.value.to_bits(), h.value.to_bits());
        assert_eq!(s.variance_hat.to_bits(), h.variance_hat.to_bits());
    }

    #[test]
    fn decomposition_without_noise() {
        let truth = SimulatedTruth::new(vec![0.0, 1.0, 0.0, 1.0], vec![0.0; 4]).unwrap();
        let w = [1, 0, 0, 1];
        let y = [0, 1, 0, 1];
        let d = variance_decomposition(&truth, &y, &w, 0.5).unwrap();
        assert_eq!(d.eps_bar_var_over_n, 0.0);
        assert_eq!(d.total, d.zeta_var_over_n);
    }

    #[test]
    fn decomposition_constant_signal() {
        let n = 1000;
        let p = 0.3;
        let c = 0.2;
        let w: Vec<u8> = (0..n).map(|i| (i % 10 < 3) as u8).collect();
        let truth = SimulatedTruth::new(vec![c; n], vec![0.0; n]).unwrap();
        let y = vec![0u8; n];
        let d = variance_decomposition(&truth, &y, &w, p).unwrap();
        let weights: Vec<f64> = w
            .iter()
            .map(|&wi| if wi == 1 { 1.0 / p } else { -1.0 / (1.0 - p) })
            .collect();
        let expect = crate::math::sample_variance(&weights) * c * c / n as f64;
        assert!((d.zeta_var_over_n - expect).abs() < 1e-12 * expect);
        // empirical moments of W close to E[W^2] = 1/p + 1/(1-p)
        let second: f64 = weights.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((second - (1.0 / p + 1.0 / (1.0 - p))).abs() < 1e-9);
    }
}
