//! Outcome learners behind one interface: the pre-experiment outcome model,
//! the meta-learner bases, and the nuisance models for covariate adjustment.

mod forest;
mod glm;
mod linalg;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

pub use forest::{fit_forest, Forest, ForestParams, Tree};
pub use glm::{fit_logistic, fit_ridge, GlmParams, Link, LinearModel};

use crate::error::{Error, Result};
use crate::frame::{FeatureMatrix, PopulationFrame};
use crate::rng::SeedSpec;

/// Which learner to fit and with what settings.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(tag = "kind", content = "params", rename_all = "snake_case")
)]
pub enum OutcomeLearnerSpec {
    Glm(GlmParams),
    RandomForest(ForestParams),
}

impl Default for OutcomeLearnerSpec {
    fn default() -> Self {
        Self::RandomForest(ForestParams::default())
    }
}

impl OutcomeLearnerSpec {
    pub fn glm() -> Self {
        Self::Glm(GlmParams::default())
    }

    pub fn random_forest() -> Self {
        Self::RandomForest(ForestParams::default())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Glm(p) => {
                if !(p.l2_penalty >= 0.0) || p.max_iterations == 0 || !(p.tolerance > 0.0) {
                    return Err(Error::Validation(format!("invalid glm parameters {p:?}")));
                }
                Ok(())
            }
            Self::RandomForest(p) => p.validate(),
        }
    }
}

/// Probability model (0/1 targets) or regression model (real targets).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Task {
    Probability,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FittedState {
    Linear(LinearModel),
    Forest(Forest),
}

/// Fit diagnostics surfaced to callers instead of being logged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Training targets were constant; the model predicts that constant.
    pub constant_target: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FittedOutcomeModel {
    spec: OutcomeLearnerSpec,
    task: Task,
    feature_names: Vec<String>,
    state: FittedState,
    diagnostics: FitDiagnostics,
}

impl FittedOutcomeModel {
    pub fn spec(&self) -> &OutcomeLearnerSpec {
        &self.spec
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn state(&self) -> &FittedState {
        &self.state
    }

    pub fn diagnostics(&self) -> FitDiagnostics {
        self.diagnostics
    }

    /// Raw predictions; probabilities for [`Task::Probability`] models.
    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        features.check_names(&self.feature_names)?;
        let mut out = match &self.state {
            FittedState::Linear(m) => m.predict(features),
            FittedState::Forest(f) => f.predict(features),
        };
        if self.task == Task::Probability {
            for p in out.iter_mut() {
                *p = p.clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

fn is_constant(y: &[f64]) -> bool {
    y.windows(2).all(|w| w[0] == w[1])
}

/// Fits a probability model of a binary outcome.
///
/// A glm refuses a constant outcome; a forest degrades to the constant
/// predictor and sets `diagnostics().constant_target`.
pub fn fit(
    spec: &OutcomeLearnerSpec,
    features: &FeatureMatrix,
    outcome: &[u8],
    seed: &SeedSpec,
) -> Result<FittedOutcomeModel> {
    if outcome.len() != features.n_rows() {
        return Err(Error::Schema(format!(
            "{} outcomes for {} rows",
            outcome.len(),
            features.n_rows()
        )));
    }
    if let Some(i) = outcome.iter().position(|&v| v > 1) {
        return Err(Error::Validation(format!("outcome at row {i} is not 0 or 1")));
    }
    let y: Vec<f64> = outcome.iter().map(|&v| v as f64).collect();
    fit_task(spec, features, &y, Task::Probability, seed)
}

/// Fits a regression model of real-valued targets (identity-link ridge for
/// `glm`, variance-split trees for `random_forest`).
pub fn fit_regressor(
    spec: &OutcomeLearnerSpec,
    features: &FeatureMatrix,
    targets: &[f64],
    seed: &SeedSpec,
) -> Result<FittedOutcomeModel> {
    if targets.len() != features.n_rows() {
        return Err(Error::Schema(format!(
            "{} targets for {} rows",
            targets.len(),
            features.n_rows()
        )));
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite regression target".into()));
    }
    fit_task(spec, features, targets, Task::Regression, seed)
}

fn fit_task(
    spec: &OutcomeLearnerSpec,
    features: &FeatureMatrix,
    y: &[f64],
    task: Task,
    seed: &SeedSpec,
) -> Result<FittedOutcomeModel> {
    spec.validate()?;
    if y.is_empty() {
        return Err(Error::Validation("cannot fit a model on zero rows".into()));
    }
    let constant = is_constant(y);
    let (state, diagnostics) = match (spec, task) {
        (OutcomeLearnerSpec::Glm(p), Task::Probability) => {
            let m = fit_logistic(features, y, p)?;
            let d = FitDiagnostics {
                iterations: m.iterations,
                converged: m.converged,
                constant_target: false,
            };
            (FittedState::Linear(m), d)
        }
        (OutcomeLearnerSpec::Glm(p), Task::Regression) => {
            let m = fit_ridge(features, y, p)?;
            let d = FitDiagnostics {
                iterations: 1,
                converged: true,
                constant_target: constant,
            };
            (FittedState::Linear(m), d)
        }
        (OutcomeLearnerSpec::RandomForest(p), _) => {
            let f = fit_forest(features, y, p, &seed.child("forest"))?;
            let d = FitDiagnostics {
                iterations: p.n_trees,
                converged: true,
                constant_target: constant,
            };
            (FittedState::Forest(f), d)
        }
    };
    Ok(FittedOutcomeModel {
        spec: *spec,
        task,
        feature_names: features.names().to_vec(),
        state,
        diagnostics,
    })
}

/// Probabilities from a [`Task::Probability`] model, always within `[0, 1]`.
pub fn predict_proba(model: &FittedOutcomeModel, features: &FeatureMatrix) -> Result<Vec<f64>> {
    if model.task != Task::Probability {
        return Err(Error::Validation(
            "predict_proba called on a regression model".into(),
        ));
    }
    model.predict(features)
}

/// Out-of-fold predictions from K-fold cross-fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFit {
    /// Control-outcome model predictions (or the pooled model when not per-arm).
    pub mu0_hat: Vec<f64>,
    /// Treated-outcome model predictions (equal to `mu0_hat` when not per-arm).
    pub mu1_hat: Vec<f64>,
    /// Fold index of each row.
    pub folds: Vec<usize>,
}

/// Fold labels, balanced within each treatment arm when a treatment column exists.
pub fn assign_folds(frame: &PopulationFrame, k: usize, seed: &SeedSpec) -> Vec<usize> {
    let n = frame.n_rows();
    let mut rng = seed.rng();
    let mut folds = vec![0; n];
    let mut groups: Vec<Vec<usize>> = match frame.treatment() {
        Some(w) => {
            let (t, c): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| w[i] == 1);
            vec![t, c]
        }
        None => vec![(0..n).collect()],
    };
    let mut offset = 0;
    for g in groups.iter_mut() {
        g.shuffle(&mut rng);
        for (j, &i) in g.iter().enumerate() {
            folds[i] = (offset + j) % k;
        }
        offset += g.len();
    }
    folds
}

/// Every row receives predictions from models that never saw it.
///
/// With `per_arm`, fold `k`'s control model trains on the complement's
/// control rows and its treated model on the complement's treated rows.
pub fn cross_fit_predictions(
    spec: &OutcomeLearnerSpec,
    frame: &PopulationFrame,
    k: usize,
    per_arm: bool,
    seed: &SeedSpec,
) -> Result<CrossFit> {
    if k < 2 {
        return Err(Error::Validation(format!("cross-fitting needs K >= 2, got {k}")));
    }
    if k > frame.n_rows() {
        return Err(Error::Validation(format!(
            "K={k} exceeds the {} available rows",
            frame.n_rows()
        )));
    }
    let outcome = frame.require_outcome()?;
    let treatment = if per_arm {
        Some(frame.require_treatment()?)
    } else {
        None
    };
    let folds = assign_folds(frame, k, &seed.child("folds"));
    let n = frame.n_rows();
    let mut mu0_hat = vec![0.0; n];
    let mut mu1_hat = vec![0.0; n];
    for fold in 0..k {
        let held: Vec<usize> = (0..n).filter(|&i| folds[i] == fold).collect();
        let held_x = frame.features().select_rows(&held);
        let fold_seed = seed.indexed("fold", fold as u64);
        let fit_on = |rows: Vec<usize>, label: &str| -> Result<Vec<f64>> {
            let x = frame.features().select_rows(&rows);
            let y: Vec<u8> = rows.iter().map(|&i| outcome[i]).collect();
            let model = fit(spec, &x, &y, &fold_seed.child(label))?;
            predict_proba(&model, &held_x)
        };
        match treatment {
            Some(w) => {
                let (train1, train0): (Vec<usize>, Vec<usize>) =
                    (0..n).filter(|&i| folds[i] != fold).partition(|&i| w[i] == 1);
                if train0.is_empty() {
                    return Err(Error::FoldMissingArm { fold, arm: "control" });
                }
                if train1.is_empty() {
                    return Err(Error::FoldMissingArm { fold, arm: "treated" });
                }
                let p0 = fit_on(train0, "mu0")?;
                let p1 = fit_on(train1, "mu1")?;
                for (j, &i) in held.iter().enumerate() {
                    mu0_hat[i] = p0[j];
                    mu1_hat[i] = p1[j];
                }
            }
            None => {
                let train: Vec<usize> = (0..n).filter(|&i| folds[i] != fold).collect();
                let p = fit_on(train, "mu")?;
                for (j, &i) in held.iter().enumerate() {
                    mu0_hat[i] = p[j];
                    mu1_hat[i] = p[j];
                }
            }
        }
    }
    Ok(CrossFit {
        mu0_hat,
        mu1_hat,
        folds,
    })
}
