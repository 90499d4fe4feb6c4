//! Logistic regression by iteratively reweighted least squares with an L2
//! penalty, and its identity-link (ridge) counterpart.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::linalg::cholesky_solve;
use crate::error::{Error, Result};
use crate::frame::FeatureMatrix;
use crate::math::{abs, ln, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct GlmParams {
    /// Strength of the L2 penalty on the slope coefficients (intercept unpenalized).
    pub l2_penalty: f64,
    pub max_iterations: usize,
    /// Stop once the largest coefficient update falls below this value.
    pub tolerance: f64,
}

impl Default for GlmParams {
    fn default() -> Self {
        Self {
            l2_penalty: 1e-6,
            max_iterations: 100,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Link {
    Logit,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub link: Link,
    pub iterations: usize,
    pub converged: bool,
}

impl LinearModel {
    #[inline]
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(row)
                .map(|(b, x)| b * x)
                .sum::<f64>()
    }

    #[inline]
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let eta = self.linear_predictor(row);
        match self.link {
            Link::Logit => sigmoid(eta),
            Link::Identity => eta,
        }
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        (0..x.n_rows()).map(|i| self.predict_row(x.row(i))).collect()
    }
}

fn check_params(p: &GlmParams) -> Result<()> {
    if !(p.l2_penalty >= 0.0) || p.max_iterations == 0 || !(p.tolerance > 0.0) {
        return Err(Error::Validation(format!("invalid glm parameters {p:?}")));
    }
    Ok(())
}

/// Accumulates `X^T W X + penalty` and `X^T v` with an intercept column prepended.
fn normal_equations(
    x: &FeatureMatrix,
    weights: &[f64],
    rhs: &[f64],
    penalty: f64,
) -> (Vec<f64>, Vec<f64>) {
    let p = x.n_cols() + 1;
    let mut h = vec![0.0; p * p];
    let mut g = vec![0.0; p];
    let mut z = vec![0.0; p];
    z[0] = 1.0;
    for i in 0..x.n_rows() {
        z[1..].copy_from_slice(x.row(i));
        let w = weights[i];
        for a in 0..p {
            let wa = w * z[a];
            g[a] += z[a] * rhs[i];
            for b in 0..=a {
                h[a * p + b] += wa * z[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            h[b * p + a] = h[a * p + b];
        }
    }
    for a in 1..p {
        h[a * p + a] += penalty;
    }
    (h, g)
}

fn penalized_loglik(x: &FeatureMatrix, y: &[f64], beta: &[f64], penalty: f64) -> f64 {
    let mut ll = 0.0;
    for i in 0..x.n_rows() {
        let eta = beta[0]
            + beta[1..]
                .iter()
                .zip(x.row(i))
                .map(|(b, v)| b * v)
                .sum::<f64>();
        // log(1 + e^eta) computed stably
        let softplus = if eta > 0.0 {
            eta + ln(1.0 + crate::math::exp(-eta))
        } else {
            ln(1.0 + crate::math::exp(eta))
        };
        ll += y[i] * eta - softplus;
    }
    ll - 0.5 * penalty * beta[1..].iter().map(|b| b * b).sum::<f64>()
}

/// Penalized logistic regression. `y` must contain both classes.
pub fn fit_logistic(x: &FeatureMatrix, y: &[f64], params: &GlmParams) -> Result<LinearModel> {
    check_params(params)?;
    let n = x.n_rows();
    if y.len() != n {
        return Err(Error::Schema(format!("{} outcomes for {n} rows", y.len())));
    }
    let positives = y.iter().filter(|&&v| v > 0.5).count();
    if positives == 0 || positives == n {
        return Err(Error::DegenerateOutcome(
            "logistic regression needs at least one positive and one negative outcome".into(),
        ));
    }
    let p = x.n_cols() + 1;
    let mut beta = vec![0.0; p];
    // start the intercept at the base-rate logit
    let rate = positives as f64 / n as f64;
    beta[0] = ln(rate / (1.0 - rate));
    let mut weights = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut ll = penalized_loglik(x, y, &beta, params.l2_penalty);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iterations {
        iterations += 1;
        for i in 0..n {
            let eta = beta[0]
                + beta[1..]
                    .iter()
                    .zip(x.row(i))
                    .map(|(b, v)| b * v)
                    .sum::<f64>();
            let mu = sigmoid(eta);
            weights[i] = (mu * (1.0 - mu)).max(1e-10);
            resid[i] = y[i] - mu;
        }
        let (h, mut g) = normal_equations(x, &weights, &resid, params.l2_penalty);
        for a in 1..p {
            g[a] -= params.l2_penalty * beta[a];
        }
        let step = cholesky_solve(&h, &g, p).ok_or_else(|| {
            Error::Validation("singular information matrix; raise l2_penalty".into())
        })?;
        // step halving keeps the penalized likelihood from decreasing
        let mut scale = 1.0;
        let mut candidate = beta.clone();
        loop {
            for a in 0..p {
                candidate[a] = beta[a] + scale * step[a];
            }
            let cand_ll = penalized_loglik(x, y, &candidate, params.l2_penalty);
            if cand_ll >= ll - 1e-12 * abs(ll) || scale < 1e-6 {
                ll = cand_ll;
                break;
            }
            scale *= 0.5;
        }
        let max_change = step.iter().map(|s| abs(s * scale)).fold(0.0, f64::max);
        beta.copy_from_slice(&candidate);
        if max_change < params.tolerance {
            converged = true;
            break;
        }
    }
    Ok(LinearModel {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        link: Link::Logit,
        iterations,
        converged,
    })
}

/// Ridge regression with unpenalized intercept.
pub fn fit_ridge(x: &FeatureMatrix, y: &[f64], params: &GlmParams) -> Result<LinearModel> {
    check_params(params)?;
    let n = x.n_rows();
    if y.len() != n || n == 0 {
        return Err(Error::Schema(format!("{} targets for {n} rows", y.len())));
    }
    let p = x.n_cols() + 1;
    let ones = vec![1.0; n];
    let (h, g) = normal_equations(x, &ones, y, params.l2_penalty);
    let beta = cholesky_solve(&h, &g, p).ok_or_else(|| {
        Error::Validation("singular design matrix; raise l2_penalty".into())
    })?;
    Ok(LinearModel {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        link: Link::Identity,
        iterations: 1,
        converged: true,
    })
}
