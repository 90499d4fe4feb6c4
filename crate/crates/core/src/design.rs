//! Strata search and oversampling design.
//!
//! Predictions of the pre-experiment outcome model are split at their
//! `(1 - p_H)` quantile; rows strictly above form the high-variance stratum.
//! For each candidate `p_H` the per-stratum Bernoulli variances `m (1 - m)`
//! give the variance quotient `Q_V`, the Neyman oversampling ratio and the
//! predicted variance ratio against proportional allocation.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{sqrt, upper_quantile_index};

fn check_share(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::Validation(format!("{name} must lie in (0,1), got {v}")));
    }
    Ok(())
}

fn check_quotient(q_v: f64) -> Result<()> {
    if !(q_v > 0.0 && q_v.is_finite()) {
        return Err(Error::Validation(format!("Q_V must be positive and finite, got {q_v}")));
    }
    Ok(())
}

/// Oversampling ratio minimizing the stratified-estimator variance:
/// `R_H = 1 / (p_H + (1 - p_H) / sqrt(Q_V))`.
pub fn optimal_oversampling_ratio(p_h: f64, q_v: f64) -> Result<f64> {
    check_share("p_H", p_h)?;
    check_quotient(q_v)?;
    Ok(1.0 / (p_h + (1.0 - p_h) / sqrt(q_v)))
}

/// Variance under optimal allocation divided by variance under proportional
/// allocation.
pub fn predicted_variance_ratio(p_h: f64, q_v: f64) -> Result<f64> {
    check_share("p_H", p_h)?;
    check_quotient(q_v)?;
    let num = p_h * sqrt(q_v) + (1.0 - p_h);
    Ok(num * num / (p_h * q_v + (1.0 - p_h)))
}

/// Largest oversampling ratio that still does not increase variance relative
/// to proportional allocation, `1 / (p_H + (1 - p_H) / Q_V)`.
pub fn safe_oversampling_bound(p_h: f64, q_v: f64) -> Result<f64> {
    check_share("p_H", p_h)?;
    check_quotient(q_v)?;
    if q_v < 1.0 {
        return Err(Error::Validation(format!(
            "Q_V={q_v} < 1: the high stratum has the lower variance, strata are mislabeled"
        )));
    }
    Ok(1.0 / (p_h + (1.0 - p_h) / q_v))
}

/// Stratified-estimator variance `N * Var` for stratum variances `v_h`, `v_l`,
/// population share `p_h` and sample share `sample_share = N_H / N`.
pub fn stratified_variance(p_h: f64, v_h: f64, v_l: f64, sample_share: f64) -> f64 {
    p_h * p_h * v_h / sample_share + (1.0 - p_h) * (1.0 - p_h) * v_l / (1.0 - sample_share)
}

/// Per-stratum variance estimates at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratumVariances {
    pub threshold: f64,
    /// Share of predictions strictly above the threshold.
    pub realized_p_h: f64,
    pub v_h: f64,
    pub v_l: f64,
    /// Predictions equal to the threshold (all kept in the low stratum).
    pub ties_at_threshold: usize,
}

/// Sorted predictions with prefix sums, answering any `p_H` in `O(log n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedPredictions {
    sorted: Vec<f64>,
    prefix: Vec<f64>,
}

impl SortedPredictions {
    pub fn new(predictions: &[f64]) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Validation("no predictions to stratify".into()));
        }
        if let Some(p) = predictions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Validation(format!("prediction {p} outside [0,1]")));
        }
        let mut sorted = predictions.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        let mut prefix = Vec::with_capacity(sorted.len() + 1);
        let mut acc = 0.0;
        prefix.push(0.0);
        for v in &sorted {
            acc += v;
            prefix.push(acc);
        }
        Ok(Self { sorted, prefix })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Threshold: the order statistic of rank `ceil((1 - p_H) n)`.
    pub fn threshold(&self, p_h: f64) -> f64 {
        self.sorted[upper_quantile_index(p_h, self.sorted.len())]
    }

    /// Number of predictions strictly above `threshold`.
    pub fn count_above(&self, threshold: f64) -> usize {
        self.sorted.len() - self.sorted.partition_point(|&v| v <= threshold)
    }

    pub fn at(&self, p_h: f64) -> Result<StratumVariances> {
        check_share("p_H", p_h)?;
        let n = self.sorted.len();
        let threshold = self.threshold(p_h);
        let split = self.sorted.partition_point(|&v| v <= threshold);
        let n_high = n - split;
        if n_high == 0 || split == 0 {
            return Err(Error::EmptyStratum {
                p_h,
                detail: format!(
                    "{n_high} of {n} predictions above threshold {threshold}; try a different p_H"
                ),
            });
        }
        let m_l = self.prefix[split] / split as f64;
        let m_h = (self.prefix[n] - self.prefix[split]) / n_high as f64;
        let first_tie = self.sorted.partition_point(|&v| v < threshold);
        Ok(StratumVariances {
            threshold,
            realized_p_h: n_high as f64 / n as f64,
            v_h: m_h * (1.0 - m_h),
            v_l: m_l * (1.0 - m_l),
            ties_at_threshold: split - first_tie,
        })
    }
}

/// Plug-in stratum variances `(V_H, V_L)` at proportion `p_H`.
pub fn stratum_variance_estimates(predictions: &[f64], p_h: f64) -> Result<(f64, f64)> {
    let s = SortedPredictions::new(predictions)?.at(p_h)?;
    Ok((s.v_h, s.v_l))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DesignPoint {
    pub p_h: f64,
    pub threshold: f64,
    pub realized_p_h: f64,
    pub v_h_hat: f64,
    pub v_l_hat: f64,
    pub q_v_hat: f64,
    pub r_h: f64,
    pub predicted_ratio: f64,
    /// More than 1% of rows tie at the threshold.
    pub heavy_ties: bool,
}

impl DesignPoint {
    fn from_variances(p_h: f64, s: &StratumVariances, n: usize) -> Option<Self> {
        if !(s.v_h > 0.0 && s.v_l > 0.0) {
            return None;
        }
        let q_v = s.v_h / s.v_l;
        Some(Self {
            p_h,
            threshold: s.threshold,
            realized_p_h: s.realized_p_h,
            v_h_hat: s.v_h,
            v_l_hat: s.v_l,
            q_v_hat: q_v,
            r_h: optimal_oversampling_ratio(p_h, q_v).ok()?,
            predicted_ratio: predicted_variance_ratio(p_h, q_v).ok()?,
            heavy_ties: s.ties_at_threshold * 100 > n,
        })
    }
}

/// `{0.01, 0.02, ..., 0.99}`.
pub fn default_grid() -> Vec<f64> {
    (1..100).map(|j| j as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignCurve {
    pub points: Vec<DesignPoint>,
    /// Grid values skipped because a stratum came out empty or had zero variance.
    pub skipped: Vec<f64>,
    predictions: SortedPredictions,
}

impl DesignCurve {
    pub fn predictions(&self) -> &SortedPredictions {
        &self.predictions
    }

    /// Point with the smallest predicted ratio; ties go to the smaller `p_H`.
    pub fn best(&self) -> Option<&DesignPoint> {
        let mut best: Option<&DesignPoint> = None;
        for p in &self.points {
            if best.is_none_or(|b| p.predicted_ratio < b.predicted_ratio) {
                best = Some(p);
            }
        }
        best
    }
}

/// Evaluates every grid value; infeasible values are skipped and listed.
pub fn design_curve(predictions: &[f64], grid: &[f64]) -> Result<DesignCurve> {
    let sorted = SortedPredictions::new(predictions)?;
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut points = Vec::with_capacity(grid.len());
    let mut skipped = Vec::new();
    for &p_h in &grid {
        check_share("grid p_H", p_h)?;
        match sorted
            .at(p_h)
            .ok()
            .and_then(|s| DesignPoint::from_variances(p_h, &s, sorted.len()))
        {
            Some(pt) => points.push(pt),
            None => skipped.push(p_h),
        }
    }
    let needed = 2.min(grid.len());
    if points.len() < needed {
        return Err(Error::EmptyStratum {
            p_h: grid.first().copied().unwrap_or(f64::NAN),
            detail: format!(
                "only {} of {} grid values give two non-degenerate strata",
                points.len(),
                grid.len()
            ),
        });
    }
    Ok(DesignCurve {
        points,
        skipped,
        predictions: sorted,
    })
}

/// The HS design: thresholds, ratios and their adjusted counterparts.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplingPlan {
    pub p_h: f64,
    pub threshold: f64,
    pub q_v_hat: f64,
    pub r_h: f64,
    pub predicted_ratio: f64,
    /// Share of the design predictions above `threshold`.
    pub population_p_h: f64,
    pub p_h_adjusted: f64,
    pub threshold_adjusted: f64,
    pub q_v_hat_adjusted: f64,
    pub r_h_adjusted: f64,
    pub population_p_h_adjusted: f64,
    pub use_adjusted: bool,
    pub treatment_p: f64,
    pub n: usize,
    /// `R_H` was cut back to `1 / p_H` so the high stratum is not over-drawn.
    pub clamped: bool,
}

impl SamplingPlan {
    pub fn effective_p_h(&self) -> f64 {
        if self.use_adjusted {
            self.p_h_adjusted
        } else {
            self.p_h
        }
    }

    pub fn effective_r_h(&self) -> f64 {
        if self.use_adjusted {
            self.r_h_adjusted
        } else {
            self.r_h
        }
    }

    pub fn effective_threshold(&self) -> f64 {
        if self.use_adjusted {
            self.threshold_adjusted
        } else {
            self.threshold
        }
    }

    pub fn effective_population_p_h(&self) -> f64 {
        if self.use_adjusted {
            self.population_p_h_adjusted
        } else {
            self.population_p_h
        }
    }

    /// Cohort members drawn from the high stratum, `round(N R_H p_H)`.
    pub fn n_high(&self) -> usize {
        crate::math::round(self.n as f64 * self.effective_r_h() * self.effective_p_h()) as usize
    }

    /// Copy with the oversampling ratio forced (e.g. to 1 for proportional allocation).
    pub fn with_ratio(&self, r_h: f64) -> Self {
        let mut p = self.clone();
        p.r_h = r_h;
        p.r_h_adjusted = r_h;
        p
    }
}

fn clamp_ratio(r: f64, p_h: f64, clamped: &mut bool) -> f64 {
    if r * p_h > 1.0 {
        *clamped = true;
        1.0 / p_h
    } else {
        r
    }
}

/// Picks the point with the smallest predicted ratio and derives the adjusted
/// design: `p_H^ad = min(1.25 p_H, 0.5)`, `R_H^ad = 0.75 R_H(Q_V^ad) + 0.25`,
/// where `Q_V^ad` is re-estimated at the adjusted threshold.
pub fn select_plan(curve: &DesignCurve, n: usize, treatment_p: f64, adjust: bool) -> Result<SamplingPlan> {
    check_share("treatment proportion", treatment_p)?;
    if n == 0 {
        return Err(Error::Validation("cohort size must be positive".into()));
    }
    let best = *curve
        .best()
        .ok_or_else(|| Error::Validation("design curve has no points".into()))?;
    let p_h_adjusted = (1.25 * best.p_h).min(0.5);
    let (threshold_adjusted, q_adj, pop_adj) = match curve.predictions.at(p_h_adjusted) {
        Ok(s) if s.v_h > 0.0 && s.v_l > 0.0 => (s.threshold, s.v_h / s.v_l, s.realized_p_h),
        // adjusted stratum degenerate: keep the selected stratum's quotient
        _ => (
            curve.predictions.threshold(p_h_adjusted),
            best.q_v_hat,
            curve
                .predictions
                .count_above(curve.predictions.threshold(p_h_adjusted)) as f64
                / curve.predictions.len() as f64,
        ),
    };
    let r_adj_raw = optimal_oversampling_ratio(p_h_adjusted, q_adj)?;
    let mut clamped = false;
    let r_h = clamp_ratio(best.r_h, best.p_h, &mut clamped);
    let r_h_adjusted = clamp_ratio(0.75 * r_adj_raw + 0.25, p_h_adjusted, &mut clamped);
    Ok(SamplingPlan {
        p_h: best.p_h,
        threshold: best.threshold,
        q_v_hat: best.q_v_hat,
        r_h,
        predicted_ratio: best.predicted_ratio,
        population_p_h: best.realized_p_h,
        p_h_adjusted,
        threshold_adjusted,
        q_v_hat_adjusted: q_adj,
        r_h_adjusted,
        population_p_h_adjusted: pop_adj,
        use_adjusted: adjust,
        treatment_p,
        n,
        clamped,
    })
}
