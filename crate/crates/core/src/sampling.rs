//! Stratifying the customer base, drawing the cohort and assigning treatment.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;

use crate::design::SamplingPlan;
use crate::error::{Error, Result};
use crate::frame::PopulationFrame;
use crate::learners::{predict_proba, FittedOutcomeModel};
use crate::math::round;
use crate::rng::SeedSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Stratum {
    #[cfg_attr(feature = "serde", serde(rename = "H"))]
    High,
    #[cfg_attr(feature = "serde", serde(rename = "L"))]
    Low,
}

impl Stratum {
    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::High => "H",
            Stratum::Low => "L",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "H" | "h" | "high" => Some(Stratum::High),
            "L" | "l" | "low" => Some(Stratum::Low),
            _ => None,
        }
    }
}

/// `High` iff the prediction is strictly above the threshold.
pub fn stratify_predictions(predictions: &[f64], threshold: f64) -> Vec<Stratum> {
    predictions
        .iter()
        .map(|&p| if p > threshold { Stratum::High } else { Stratum::Low })
        .collect()
}

pub fn stratify(
    population: &PopulationFrame,
    model: &FittedOutcomeModel,
    threshold: f64,
) -> Result<Vec<Stratum>> {
    let preds = predict_proba(model, population.features())?;
    Ok(stratify_predictions(&preds, threshold))
}

/// Share of rows labelled `High`.
pub fn high_share(labels: &[Stratum]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|&&s| s == Stratum::High).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CohortDesign {
    Hs { p_h: f64, r_h: f64 },
    Uniform,
}

/// Selected individuals with their stratum and (after assignment) treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    /// Row indices into the source population, ascending.
    pub rows: Vec<usize>,
    pub ids: Vec<u64>,
    pub strata: Vec<Stratum>,
    pub treatment: Option<Vec<u8>>,
    pub design: CohortDesign,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, stratum: Stratum) -> usize {
        self.strata.iter().filter(|&&s| s == stratum).count()
    }

    pub fn require_treatment(&self) -> Result<&[u8]> {
        self.treatment
            .as_deref()
            .ok_or_else(|| Error::Validation("cohort has no treatment assignment yet".into()))
    }
}

fn rows_of(labels: &[Stratum], stratum: Stratum) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == stratum)
        .map(|(i, _)| i)
        .collect()
}

fn pick(rows: &[usize], k: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    index::sample(rng, rows.len(), k)
        .into_iter()
        .map(|j| rows[j])
        .collect()
}

fn assemble(
    population: &PopulationFrame,
    labels: &[Stratum],
    mut rows: Vec<usize>,
    design: CohortDesign,
) -> Cohort {
    rows.sort_unstable();
    Cohort {
        ids: rows.iter().map(|&r| population.ids()[r]).collect(),
        strata: rows.iter().map(|&r| labels[r]).collect(),
        rows,
        treatment: None,
        design,
    }
}

/// Simple random sampling without replacement inside each stratum:
/// `round(N R_H p_H)` rows from `High`, the rest from `Low`.
pub fn draw_stratified(
    population: &PopulationFrame,
    labels: &[Stratum],
    n: usize,
    p_h: f64,
    r_h: f64,
    seed: &SeedSpec,
) -> Result<Cohort> {
    if labels.len() != population.n_rows() {
        return Err(Error::Schema(format!(
            "{} labels for {} population rows",
            labels.len(),
            population.n_rows()
        )));
    }
    let share = r_h * p_h;
    if !(share > 0.0 && share < 1.0) || !(r_h > 0.0) {
        return Err(Error::Validation(format!(
            "sampled high-stratum share R_H p_H = {share} must lie in (0,1)"
        )));
    }
    let high = rows_of(labels, Stratum::High);
    let low = rows_of(labels, Stratum::Low);
    let n_high = round(n as f64 * share) as usize;
    let n_low = n - n_high.min(n);
    let max_feasible = ((high.len() as f64 / share).min(low.len() as f64 / (1.0 - share))) as usize;
    if n_high > high.len() {
        return Err(Error::StratumExhausted {
            stratum: "H",
            needed: n_high,
            available: high.len(),
            max_feasible_n: max_feasible,
        });
    }
    if n_low > low.len() {
        return Err(Error::StratumExhausted {
            stratum: "L",
            needed: n_low,
            available: low.len(),
            max_feasible_n: max_feasible,
        });
    }
    let mut rng = seed.rng();
    let mut rows = pick(&high, n_high, &mut rng);
    rows.extend(pick(&low, n_low, &mut rng));
    Ok(assemble(population, labels, rows, CohortDesign::Hs { p_h, r_h }))
}

/// HS cohort following `plan`'s effective `p_H`, `R_H` and size.
pub fn draw_cohort(
    population: &PopulationFrame,
    labels: &[Stratum],
    plan: &SamplingPlan,
    seed: &SeedSpec,
) -> Result<Cohort> {
    draw_stratified(
        population,
        labels,
        plan.n,
        plan.effective_p_h(),
        plan.effective_r_h(),
        seed,
    )
}

/// Completely random cohort of size `n`; labels ride along for post-stratification.
pub fn draw_uniform(
    population: &PopulationFrame,
    labels: &[Stratum],
    n: usize,
    seed: &SeedSpec,
) -> Result<Cohort> {
    if n > population.n_rows() {
        return Err(Error::Validation(format!(
            "cohort of {n} exceeds population of {}",
            population.n_rows()
        )));
    }
    if labels.len() != population.n_rows() {
        return Err(Error::Schema("labels do not match population".into()));
    }
    let mut rng = seed.rng();
    let rows = index::sample(&mut rng, population.n_rows(), n).into_vec();
    Ok(assemble(population, labels, rows, CohortDesign::Uniform))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Assignment {
    /// Complete randomization over the whole cohort.
    #[default]
    Pooled,
    /// Complete randomization inside each stratum.
    StratumBlocked,
}

/// Exactly `round(p N)` treated, uniformly over the cohort.
pub fn assign_treatment(cohort: &Cohort, p: f64, seed: &SeedSpec) -> Result<Cohort> {
    assign_treatment_with(cohort, p, Assignment::Pooled, seed)
}

pub fn assign_treatment_with(
    cohort: &Cohort,
    p: f64,
    mode: Assignment,
    seed: &SeedSpec,
) -> Result<Cohort> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Validation(format!("treatment proportion {p} outside (0,1)")));
    }
    let mut rng = seed.rng();
    let mut w = vec![0u8; cohort.len()];
    let groups: Vec<Vec<usize>> = match mode {
        Assignment::Pooled => vec![(0..cohort.len()).collect()],
        Assignment::StratumBlocked => vec![
            rows_of(&cohort.strata, Stratum::High),
            rows_of(&cohort.strata, Stratum::Low),
        ],
    };
    for g in &groups {
        let k = round(p * g.len() as f64) as usize;
        for j in index::sample(&mut rng, g.len(), k) {
            w[g[j]] = 1;
        }
    }
    let mut out = cohort.clone();
    out.treatment = Some(w);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::FeatureMatrix;
    use alloc::string::String;

    fn population(n: usize) -> PopulationFrame {
        let fm = FeatureMatrix::new(
            vec![String::from("x")],
            n,
            (0..n).map(|i| i as f64).collect(),
        )
        .unwrap();
        PopulationFrame::new(fm, None, None, None).unwrap()
    }

    fn labels(n: usize, n_high: usize) -> Vec<Stratum> {
        (0..n)
            .map(|i| if i < n_high { Stratum::High } else { Stratum::Low })
            .collect()
    }

    #[test]
    fn threshold_boundaries() {
        let preds = [0.1, 0.4, 0.9];
        assert!(stratify_predictions(&preds, 0.95).iter().all(|&s| s == Stratum::Low));
        assert!(stratify_predictions(&preds, -1.0).iter().all(|&s| s == Stratum::High));
        // ties at the threshold stay low
        assert_eq!(stratify_predictions(&preds, 0.4)[1], Stratum::Low);
    }

    #[test]
    fn hs_composition() {
        let pop = population(1000);
        let lab = labels(1000, 100);
        let c = draw_stratified(&pop, &lab, 100, 0.1, 3.4, &SeedSpec::new(3, "c")).unwrap();
        assert_eq!(c.count(Stratum::High), 34);
        assert_eq!(c.count(Stratum::Low), 66);
        let lab = labels(1000, 300);
        let c = draw_stratified(&pop, &lab, 100, 0.3, 1.0, &SeedSpec::new(3, "c")).unwrap();
        assert_eq!(c.count(Stratum::High), 30);
        assert_eq!(c.count(Stratum::Low), 70);
        let mut ids = c.ids.clone();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn exhausted_stratum_reports_feasible_size() {
        let pop = population(1000);
        let lab = labels(1000, 100);
        // |H| / (R p) = 100 / 0.34 = 294
        let err = draw_stratified(&pop, &lab, 400, 0.1, 3.4, &SeedSpec::new(3, "c")).unwrap_err();
        match err {
            Error::StratumExhausted { stratum, max_feasible_n, .. } => {
                assert_eq!(stratum, "H");
                assert_eq!(max_feasible_n, 294);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn exact_treated_counts() {
        let pop = population(20_000);
        let lab = labels(20_000, 2_000);
        let c = draw_uniform(&pop, &lab, 20_000, &SeedSpec::new(1, "u")).unwrap();
        let t = assign_treatment(&c, 0.5, &SeedSpec::new(1, "w")).unwrap();
        assert_eq!(t.treatment.as_ref().unwrap().iter().filter(|&&w| w == 1).count(), 10_000);
        let c = draw_uniform(&pop, &lab, 100, &SeedSpec::new(1, "u")).unwrap();
        let t = assign_treatment(&c, 0.85, &SeedSpec::new(1, "w")).unwrap();
        assert_eq!(t.treatment.as_ref().unwrap().iter().filter(|&&w| w == 1).count(), 85);
        let again = assign_treatment(&c, 0.85, &SeedSpec::new(1, "w")).unwrap();
        assert_eq!(t.treatment, again.treatment);
        let other = assign_treatment(&c, 0.85, &SeedSpec::new(2, "w")).unwrap();
        assert_ne!(t.treatment, other.treatment);
    }

    #[test]
    fn blocked_assignment_balances_each_stratum() {
        let pop = population(1000);
        let lab = labels(1000, 200);
        let c = draw_stratified(&pop, &lab, 500, 0.2, 2.0, &SeedSpec::new(5, "c")).unwrap();
        let t = assign_treatment_with(&c, 0.5, Assignment::StratumBlocked, &SeedSpec::new(5, "w"))
            .unwrap();
        let w = t.treatment.unwrap();
        let treated_high = (0..c.len())
            .filter(|&i| c.strata[i] == Stratum::High && w[i] == 1)
            .count();
        assert_eq!(treated_high, 100);
    }
}
