//! T-, S- and X-learners over any outcome learner.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::frame::{FeatureMatrix, PopulationFrame};
use crate::learners::{fit, fit_regressor, predict_proba, FittedOutcomeModel, OutcomeLearnerSpec};
use crate::rng::SeedSpec;

/// Name of the treatment column the S-learner appends to the features.
pub const S_LEARNER_TREATMENT_COLUMN: &str = "w";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MetaKind {
    T,
    S,
    X,
}

/// Meta-learner choice plus its base learner.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UpliftSpec {
    pub meta: MetaKind,
    pub learner: OutcomeLearnerSpec,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum UpliftComponents {
    T {
        mu0: FittedOutcomeModel,
        mu1: FittedOutcomeModel,
    },
    S {
        mu: FittedOutcomeModel,
    },
    X {
        mu0: FittedOutcomeModel,
        mu1: FittedOutcomeModel,
        tau1: FittedOutcomeModel,
        tau0: FittedOutcomeModel,
        p: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UpliftModel {
    feature_names: Vec<String>,
    components: UpliftComponents,
}

impl UpliftModel {
    pub fn meta_kind(&self) -> MetaKind {
        match self.components {
            UpliftComponents::T { .. } => MetaKind::T,
            UpliftComponents::S { .. } => MetaKind::S,
            UpliftComponents::X { .. } => MetaKind::X,
        }
    }

    pub fn components(&self) -> &UpliftComponents {
        &self.components
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }
}

struct Arms {
    treated: Vec<usize>,
    control: Vec<usize>,
}

fn arms(frame: &PopulationFrame) -> Result<Arms> {
    frame.require_outcome()?;
    let treated = frame.arm_rows(1)?;
    let control = frame.arm_rows(0)?;
    if treated.is_empty() {
        return Err(Error::EmptyArm("no treated rows to fit on".into()));
    }
    if control.is_empty() {
        return Err(Error::EmptyArm("no control rows to fit on".into()));
    }
    Ok(Arms { treated, control })
}

fn fit_arm(
    frame: &PopulationFrame,
    rows: &[usize],
    spec: &OutcomeLearnerSpec,
    seed: &SeedSpec,
) -> Result<FittedOutcomeModel> {
    let sub = frame.select(rows);
    fit(spec, sub.features(), sub.require_outcome()?, seed)
}

pub fn fit_t_learner(
    frame: &PopulationFrame,
    spec: &OutcomeLearnerSpec,
    seed: &SeedSpec,
) -> Result<UpliftModel> {
    let a = arms(frame)?;
    let mu0 = fit_arm(frame, &a.control, spec, &seed.child("mu0"))?;
    let mu1 = fit_arm(frame, &a.treated, spec, &seed.child("mu1"))?;
    Ok(UpliftModel {
        feature_names: frame.features().names().to_vec(),
        components: UpliftComponents::T { mu0, mu1 },
    })
}

pub fn fit_s_learner(
    frame: &PopulationFrame,
    spec: &OutcomeLearnerSpec,
    seed: &SeedSpec,
) -> Result<UpliftModel> {
    let w = frame.require_treatment()?;
    let y = frame.require_outcome()?;
    let wf: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let x = frame.features().with_column(S_LEARNER_TREATMENT_COLUMN, &wf)?;
    let mu = fit(spec, &x, y, &seed.child("mu"))?;
    Ok(UpliftModel {
        feature_names: frame.features().names().to_vec(),
        components: UpliftComponents::S { mu },
    })
}

/// Two-stage learner; the final score is `p tau1(x) + (1 - p) tau0(x)`.
pub fn fit_x_learner(
    frame: &PopulationFrame,
    spec: &OutcomeLearnerSpec,
    p: f64,
    seed: &SeedSpec,
) -> Result<UpliftModel> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Validation(format!("X-learner weight {p} outside [0,1]")));
    }
    let a = arms(frame)?;
    let mu0 = fit_arm(frame, &a.control, spec, &seed.child("mu0"))?;
    let mu1 = fit_arm(frame, &a.treated, spec, &seed.child("mu1"))?;
    let treated = frame.select(&a.treated);
    let control = frame.select(&a.control);
    let d1 = pseudo_outcomes_treated(&mu0, &treated)?;
    let d0 = pseudo_outcomes_control(&mu1, &control)?;
    let tau1 = fit_regressor(spec, treated.features(), &d1, &seed.child("tau1"))?;
    let tau0 = fit_regressor(spec, control.features(), &d0, &seed.child("tau0"))?;
    Ok(UpliftModel {
        feature_names: frame.features().names().to_vec(),
        components: UpliftComponents::X {
            mu0,
            mu1,
            tau1,
            tau0,
            p,
        },
    })
}

/// `y - mu0_hat(x)` on treated rows.
pub fn pseudo_outcomes_treated(mu0: &FittedOutcomeModel, treated: &PopulationFrame) -> Result<Vec<f64>> {
    let m = predict_proba(mu0, treated.features())?;
    let y = treated.require_outcome()?;
    Ok(y.iter().zip(&m).map(|(&y, &m)| y as f64 - m).collect())
}

/// `mu1_hat(x) - y` on control rows.
pub fn pseudo_outcomes_control(mu1: &FittedOutcomeModel, control: &PopulationFrame) -> Result<Vec<f64>> {
    let m = predict_proba(mu1, control.features())?;
    let y = control.require_outcome()?;
    Ok(y.iter().zip(&m).map(|(&y, &m)| m - y as f64).collect())
}

pub fn fit_uplift(
    spec: &UpliftSpec,
    frame: &PopulationFrame,
    treatment_p: f64,
    seed: &SeedSpec,
) -> Result<UpliftModel> {
    match spec.meta {
        MetaKind::T => fit_t_learner(frame, &spec.learner, seed),
        MetaKind::S => fit_s_learner(frame, &spec.learner, seed),
        MetaKind::X => fit_x_learner(frame, &spec.learner, treatment_p, seed),
    }
}

/// Per-row CATE scores.
pub fn predict_cate(model: &UpliftModel, features: &FeatureMatrix) -> Result<Vec<f64>> {
    features.check_names(&model.feature_names)?;
    let out = match &model.components {
        UpliftComponents::T { mu0, mu1 } => {
            let a = predict_proba(mu1, features)?;
            let b = predict_proba(mu0, features)?;
            a.iter().zip(&b).map(|(a, b)| a - b).collect()
        }
        UpliftComponents::S { mu } => {
            let n = features.n_rows();
            let x1 = features.with_column(S_LEARNER_TREATMENT_COLUMN, &vec![1.0; n])?;
            let x0 = features.with_column(S_LEARNER_TREATMENT_COLUMN, &vec![0.0; n])?;
            let a = predict_proba(mu, &x1)?;
            let b = predict_proba(mu, &x0)?;
            a.iter().zip(&b).map(|(a, b)| a - b).collect()
        }
        UpliftComponents::X { tau1, tau0, p, .. } => {
            let a = tau1.predict(features)?;
            let b = tau0.predict(features)?;
            a.iter().zip(&b).map(|(a, b)| p * a + (1.0 - p) * b).collect()
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{ForestParams, GlmParams};
    use crate::math::sigmoid;
    use rand::Rng as _;

    fn frame(n: usize, seed: u64, logit: impl Fn(f64, u8) -> f64) -> PopulationFrame {
        let mut rng = SeedSpec::new(seed, "uplift").rng();
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let w: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y: Vec<u8> = (0..n)
            .map(|i| rng.random_bool(sigmoid(logit(x[i], w[i]))) as u8)
            .collect();
        let fm = FeatureMatrix::new(vec![String::from("x")], n, x).unwrap();
        PopulationFrame::new(fm, Some(y), Some(w), None).unwrap()
    }

    fn small_forest() -> OutcomeLearnerSpec {
        OutcomeLearnerSpec::RandomForest(ForestParams {
            n_trees: 20,
            ..Default::default()
        })
    }

    #[test]
    fn constant_arms_give_zero() {
        let f = frame(200, 1, |_, _| -100.0);
        assert!(f.outcome().unwrap().iter().all(|&y| y == 0));
        let m = fit_t_learner(&f, &small_forest(), &SeedSpec::new(1, "t")).unwrap();
        let s = predict_cate(&m, f.features()).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glm_t_learner_additive_truth_is_flat() {
        let f = frame(20_000, 2, |x, w| -2.0 + 0.3 * x + 0.2 * w as f64);
        let m = fit_t_learner(&f, &OutcomeLearnerSpec::Glm(GlmParams::default()), &SeedSpec::new(2, "t"))
            .unwrap();
        let s = predict_cate(&m, f.features()).unwrap();
        let max = s.iter().cloned().fold(f64::MIN, f64::max);
        let min = s.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max - min < 0.05, "range {}", max - min);
    }

    #[test]
    fn s_learner_null_effect() {
        let f = frame(20_000, 3, |x, _| -1.0 + x);
        let m = fit_s_learner(&f, &small_forest(), &SeedSpec::new(3, "s")).unwrap();
        let s = predict_cate(&m, f.features()).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn s_learner_stump_values() {
        let f = frame(2_000, 4, |x, w| x + w as f64);
        let spec = OutcomeLearnerSpec::RandomForest(ForestParams {
            n_trees: 1,
            max_depth: 1,
            feature_fraction: Some(1.0),
            ..Default::default()
        });
        let m = fit_s_learner(&f, &spec, &SeedSpec::new(4, "s")).unwrap();
        let mut s = predict_cate(&m, f.features()).unwrap();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s.dedup();
        assert!(s.len() <= 2);
    }

    #[test]
    fn x_learner_weights() {
        let f = frame(3_000, 5, |x, w| x + 0.5 * x * w as f64);
        let spec = small_forest();
        let seed = SeedSpec::new(5, "x");
        let half = fit_x_learner(&f, &spec, 0.5, &seed).unwrap();
        let one = fit_x_learner(&f, &spec, 1.0, &seed).unwrap();
        let UpliftComponents::X { tau1, tau0, .. } = half.components() else {
            panic!()
        };
        let a = tau1.predict(f.features()).unwrap();
        let b = tau0.predict(f.features()).unwrap();
        let s = predict_cate(&half, f.features()).unwrap();
        for i in 0..s.len() {
            assert!((s[i] - 0.5 * (a[i] + b[i])).abs() < 1e-15);
        }
        let s1 = predict_cate(&one, f.features()).unwrap();
        assert_eq!(s1, a);
    }

    #[test]
    fn refit_is_bit_identical() {
        let f = frame(1_000, 6, |x, w| x * w as f64);
        for spec in [small_forest(), OutcomeLearnerSpec::glm()] {
            for meta in [MetaKind::T, MetaKind::S, MetaKind::X] {
                let u = UpliftSpec { meta, learner: spec };
                let a = fit_uplift(&u, &f, 0.5, &SeedSpec::new(9, "r")).unwrap();
                let b = fit_uplift(&u, &f, 0.5, &SeedSpec::new(9, "r")).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn permuted_rows_permute_scores() {
        let f = frame(500, 7, |x, w| x * w as f64);
        let m = fit_t_learner(&f, &small_forest(), &SeedSpec::new(7, "t")).unwrap();
        let s = predict_cate(&m, f.features()).unwrap();
        let perm: Vec<usize> = (0..500).rev().collect();
        let sp = predict_cate(&m, &f.features().select_rows(&perm)).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(sp[j], s[i]);
        }
    }

    #[test]
    fn empty_arm_rejected() {
        let f = frame(100, 8, |x, _| x);
        let all_control = f.with_treatment(vec![0; 100]).unwrap();
        assert!(matches!(
            fit_t_learner(&all_control, &small_forest(), &SeedSpec::new(1, "t")),
            Err(Error::EmptyArm(_))
        ));
    }
}
