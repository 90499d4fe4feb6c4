//! Qini curves and the area under them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::estimation::{masked_dim, masked_stratified};
use crate::math::{round, top_count};
use crate::rng::SeedSpec;
use crate::sampling::Stratum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Correction {
    #[default]
    None,
    Hs,
    Covadj,
    HsCovadj,
}

impl Correction {
    pub fn as_str(self) -> &'static str {
        match self {
            Correction::None => "none",
            Correction::Hs => "hs",
            Correction::Covadj => "covadj",
            Correction::HsCovadj => "hs_covadj",
        }
    }
}

/// How `Q(t)` scales `ATE_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum QiniMode {
    /// `Q(t) = ATE_t * t`.
    #[default]
    Approximate,
    /// `Q(t) = ATE_t * N_w(t) / N_w`, the treated rows in the top set over
    /// all treated rows (for HS curves, the reference share above the cut-off).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QiniPoint {
    pub t: f64,
    /// `None` when the top set lacks a needed arm.
    pub ate_t: Option<f64>,
    pub q: Option<f64>,
    pub variance_hat: Option<f64>,
    pub n_top: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QiniCurve {
    pub points: Vec<QiniPoint>,
    pub correction: Correction,
    pub mode: QiniMode,
    /// Share of rows whose score equals another row's score.
    pub tie_fraction: f64,
}

impl QiniCurve {
    pub fn grid(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }

    pub fn q_values(&self) -> Vec<Option<f64>> {
        self.points.iter().map(|p| p.q).collect()
    }

    pub fn n_missing(&self) -> usize {
        self.points.iter().filter(|p| p.q.is_none()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AuqEstimator {
    OracleCdf,
    Decile,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AuqResult {
    pub value: f64,
    pub estimator: AuqEstimator,
    pub grid_size: Option<usize>,
}

/// Test-set outcomes, assignment and scores; `adjustment` holds `Phi(x)` when
/// outcomes should be replaced by `y - Phi(x)`.
#[derive(Debug, Clone, Copy)]
pub struct QiniInput<'a> {
    pub outcome: &'a [u8],
    pub treatment: &'a [u8],
    pub scores: &'a [f64],
    pub adjustment: Option<&'a [f64]>,
}

impl<'a> QiniInput<'a> {
    pub fn new(outcome: &'a [u8], treatment: &'a [u8], scores: &'a [f64]) -> Self {
        Self {
            outcome,
            treatment,
            scores,
            adjustment: None,
        }
    }

    pub fn adjusted(mut self, adjustment: &'a [f64]) -> Self {
        self.adjustment = Some(adjustment);
        self
    }

    fn validate(&self) -> Result<Vec<f64>> {
        let n = self.outcome.len();
        if self.treatment.len() != n || self.scores.len() != n {
            return Err(Error::Schema(format!(
                "{} outcomes, {} treatment flags, {} scores",
                n,
                self.treatment.len(),
                self.scores.len()
            )));
        }
        if n == 0 {
            return Err(Error::Validation("empty test set".into()));
        }
        check_scores(self.scores)?;
        Ok(match self.adjustment {
            Some(a) => {
                if a.len() != n {
                    return Err(Error::Schema(format!("{} adjustments for {n} rows", a.len())));
                }
                self.outcome.iter().zip(a).map(|(&y, &a)| y as f64 - a).collect()
            }
            None => self.outcome.iter().map(|&y| y as f64).collect(),
        })
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Validation(format!("score at row {i} is NaN")));
    }
    Ok(())
}

/// `{1/T, 2/T, ..., 1}`.
pub fn grid(size: usize) -> Vec<f64> {
    (1..=size).map(|t| t as f64 / size as f64).collect()
}

/// Row indices by descending score, ties in row order.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Share of rows that share their score with at least one other row.
pub fn tie_fraction(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let mut tied = 0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i + 1;
        while j < s.len() && s[j] == s[i] {
            j += 1;
        }
        if j - i > 1 {
            tied += j - i;
        }
        i = j;
    }
    tied as f64 / s.len() as f64
}

fn check_grid(size: usize) -> Result<()> {
    if size == 0 {
        return Err(Error::Validation("grid size must be at least 1".into()));
    }
    Ok(())
}

/// Qini curve on a uniformly sampled test set.
///
/// The top-`t` set holds the first `ceil(t n)` rows by descending score.
pub fn qini_curve(input: &QiniInput<'_>, grid_size: usize, mode: QiniMode) -> Result<QiniCurve> {
    check_grid(grid_size)?;
    let y = input.validate()?;
    let w = input.treatment;
    let n = y.len();
    let order = descending_order(input.scores);
    let n_treated_total = w.iter().filter(|&&v| v == 1).count();
    let mut in_top = vec![false; n];
    let mut filled = 0;
    let mut points = Vec::with_capacity(grid_size);
    for t in grid(grid_size) {
        let k = top_count(t, n);
        for &i in &order[filled..k] {
            in_top[i] = true;
        }
        filled = k;
        let (ate, var, n1, n0) = masked_dim(&y, w, |i| in_top[i]);
        let ok = n1 > 0 && n0 > 0;
        let scale = match mode {
            QiniMode::Approximate => t,
            QiniMode::Exact => n1 as f64 / n_treated_total as f64,
        };
        points.push(QiniPoint {
            t,
            ate_t: ok.then_some(ate),
            q: ok.then_some(ate * scale),
            variance_hat: ok.then_some(var),
            n_top: k,
        });
    }
    Ok(QiniCurve {
        points,
        correction: if input.adjustment.is_some() {
            Correction::Covadj
        } else {
            Correction::None
        },
        mode,
        tie_fraction: tie_fraction(input.scores),
    })
}

/// Scores and strata of a frame whose composition matches the population.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [Stratum],
}

/// Cut-off and high-stratum share of the top-`t` reference rows.
fn reference_cut(order: &[usize], reference: &Reference<'_>, k: usize) -> (f64, f64) {
    let threshold = reference.scores[order[k - 1]];
    let high = order[..k]
        .iter()
        .filter(|&&i| reference.labels[i] == Stratum::High)
        .count();
    (threshold, high as f64 / k as f64)
}

/// Qini curve on an HS test set.
///
/// Cut-offs and the per-point high share `p_H,t` come from `reference`;
/// cohort rows scoring at or above a cut-off enter the stratified estimate.
pub fn hs_qini_curve(
    input: &QiniInput<'_>,
    labels: &[Stratum],
    reference: &Reference<'_>,
    grid_size: usize,
    mode: QiniMode,
) -> Result<QiniCurve> {
    check_grid(grid_size)?;
    let y = input.validate()?;
    if labels.len() != y.len() {
        return Err(Error::Schema(format!("{} labels for {} rows", labels.len(), y.len())));
    }
    if reference.scores.is_empty() || reference.scores.len() != reference.labels.len() {
        return Err(Error::Schema("reference scores and labels must be nonempty and aligned".into()));
    }
    check_scores(reference.scores)?;
    let w = input.treatment;
    let scores = input.scores;
    let n_ref = reference.scores.len();
    let order = descending_order(reference.scores);
    let mut points = Vec::with_capacity(grid_size);
    for t in grid(grid_size) {
        let k = top_count(t, n_ref).max(1);
        let (threshold, p_ht) = reference_cut(&order, reference, k);
        let res = masked_stratified(&y, w, labels, p_ht, |i| scores[i] >= threshold);
        let n_top = (0..y.len()).filter(|&i| scores[i] >= threshold).count();
        let scale = match mode {
            QiniMode::Approximate => t,
            QiniMode::Exact => k as f64 / n_ref as f64,
        };
        points.push(match res {
            Ok((ate, var, _, _)) => QiniPoint {
                t,
                ate_t: Some(ate),
                q: Some(ate * scale),
                variance_hat: Some(var),
                n_top,
            },
            Err(_) => QiniPoint {
                t,
                ate_t: None,
                q: None,
                variance_hat: None,
                n_top,
            },
        });
    }
    Ok(QiniCurve {
        points,
        correction: if input.adjustment.is_some() {
            Correction::HsCovadj
        } else {
            Correction::Hs
        },
        mode,
        tie_fraction: tie_fraction(scores),
    })
}

/// Rows of an HS test set forming a population-proportional reference:
/// every low row plus a random `round(n_L p_H / (1 - p_H))` high rows.
pub fn downsample_reference(
    labels: &[Stratum],
    population_p_h: f64,
    seed: &SeedSpec,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&population_p_h) {
        return Err(Error::Validation(format!(
            "population p_H = {population_p_h} outside [0,1)"
        )));
    }
    let high: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Stratum::High).collect();
    let n_low = labels.len() - high.len();
    let want = round(n_low as f64 * population_p_h / (1.0 - population_p_h)) as usize;
    if want > high.len() {
        return Err(Error::Validation(format!(
            "test set holds {} high rows, proportional reference needs {want}",
            high.len()
        )));
    }
    let mut keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Stratum::Low).collect();
    let mut rng = seed.rng();
    keep.extend(index::sample(&mut rng, high.len(), want).into_iter().map(|j| high[j]));
    keep.sort_unstable();
    Ok(keep)
}

/// `E[tau | top t] * t` on a frame with known effects, ranking as in [`qini_curve`].
pub fn truth_qini_curve(scores: &[f64], tau: &[f64], grid_size: usize) -> Result<Vec<(f64, f64)>> {
    check_grid(grid_size)?;
    if scores.len() != tau.len() || scores.is_empty() {
        return Err(Error::Schema("scores and effects must be nonempty and aligned".into()));
    }
    check_scores(scores)?;
    let n = scores.len();
    let order = descending_order(scores);
    let mut sum = 0.0;
    let mut filled = 0;
    let mut out = Vec::with_capacity(grid_size);
    for t in grid(grid_size) {
        let k = top_count(t, n);
        for &i in &order[filled..k] {
            sum += tau[i];
        }
        filled = k;
        out.push((t, sum / k as f64 * t));
    }
    Ok(out)
}

/// Empirical CDF of the scores with midranks for ties.
pub fn midrank_cdf(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut f = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their average
        let mid = (i + 1 + j) as f64 / 2.0 / n as f64;
        for &r in &order[i..j] {
            f[r] = mid;
        }
        i = j;
    }
    f
}

/// `mean(F(score_i) tau_i)` with known effects.
pub fn auq_oracle(scores: &[f64], tau: &[f64]) -> Result<AuqResult> {
    if scores.len() != tau.len() || scores.is_empty() {
        return Err(Error::Schema("scores and effects must be nonempty and aligned".into()));
    }
    check_scores(scores)?;
    let f = midrank_cdf(scores);
    let value = f.iter().zip(tau).map(|(f, t)| f * t).sum::<f64>() / scores.len() as f64;
    Ok(AuqResult {
        value,
        estimator: AuqEstimator::OracleCdf,
        grid_size: None,
    })
}

/// Estimated area from `T` score slices.
///
/// Slice `s = 0..T` (counted from the top) holds rows ranked between
/// `ceil(s n / T)` and `ceil((s + 1) n / T)`; its effect estimate is weighted
/// by `(T - s) / T^2`. Slices with an empty arm fail the call.
pub fn auq_decile(input: &QiniInput<'_>, grid_size: usize) -> Result<AuqResult> {
    check_grid(grid_size)?;
    let y = input.validate()?;
    let w = input.treatment;
    let n = y.len();
    let order = descending_order(input.scores);
    let mut slice = vec![usize::MAX; n];
    for s in 0..grid_size {
        let lo = top_count(s as f64 / grid_size as f64, n);
        let hi = top_count((s + 1) as f64 / grid_size as f64, n);
        for &i in &order[lo..hi] {
            slice[i] = s;
        }
    }
    let mut value = 0.0;
    for s in 0..grid_size {
        let (ate, _, n1, n0) = masked_dim(&y, w, |i| slice[i] == s);
        if n1 == 0 || n0 == 0 {
            return Err(Error::EmptyArm(format!("score slice {s} lacks an arm")));
        }
        value += slice_weight(s, grid_size) * ate;
    }
    Ok(AuqResult {
        value,
        estimator: AuqEstimator::Decile,
        grid_size: Some(grid_size),
    })
}

fn slice_weight(s: usize, size: usize) -> f64 {
    (size - s) as f64 / (size * size) as f64
}

/// [`auq_decile`] on an HS test set: slice bounds and the per-slice high
/// share come from `reference`, and slice effects are stratified.
pub fn hs_auq_decile(
    input: &QiniInput<'_>,
    labels: &[Stratum],
    reference: &Reference<'_>,
    grid_size: usize,
) -> Result<AuqResult> {
    check_grid(grid_size)?;
    let y = input.validate()?;
    if labels.len() != y.len() {
        return Err(Error::Schema(format!("{} labels for {} rows", labels.len(), y.len())));
    }
    if reference.scores.is_empty() || reference.scores.len() != reference.labels.len() {
        return Err(Error::Schema("reference scores and labels must be nonempty and aligned".into()));
    }
    check_scores(reference.scores)?;
    let n_ref = reference.scores.len();
    let order = descending_order(reference.scores);
    let scores = input.scores;
    let mut value = 0.0;
    let mut upper = f64::INFINITY;
    for s in 0..grid_size {
        let lo = top_count(s as f64 / grid_size as f64, n_ref);
        let hi = top_count((s + 1) as f64 / grid_size as f64, n_ref);
        if hi == lo {
            continue;
        }
        let lower = reference.scores[order[hi - 1]];
        let high = order[lo..hi]
            .iter()
            .filter(|&&i| reference.labels[i] == Stratum::High)
            .count();
        let p_hs = high as f64 / (hi - lo) as f64;
        let top_slice = s == 0;
        let (ate, _, _, _) = masked_stratified(&y, input.treatment, labels, p_hs, |i| {
            scores[i] >= lower && (top_slice || scores[i] < upper)
        })
        .map_err(|(st, arm)| {
            Error::EmptyArm(format!("score slice {s}, stratum {}, lacks {arm} rows", st.as_str()))
        })?;
        value += slice_weight(s, grid_size) * ate;
        upper = lower;
    }
    Ok(AuqResult {
        value,
        estimator: AuqEstimator::Decile,
        grid_size: Some(grid_size),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{diff_in_means, stratified_ate};
    use rand::Rng as _;

    fn rct(n: usize, seed: u64, tau: impl Fn(usize) -> f64) -> (Vec<u8>, Vec<u8>, Vec<f64>) {
        let mut rng = SeedSpec::new(seed, "qini").rng();
        let w: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let taus: Vec<f64> = (0..n).map(&tau).collect();
        let y = (0..n)
            .map(|i| rng.random_bool(0.3 + w[i] as f64 * taus[i]) as u8)
            .collect();
        (y, w, taus)
    }

    #[test]
    fn full_share_matches_dim_bitwise() {
        let (y, w, _) = rct(5_000, 1, |_| 0.05);
        let mut rng = SeedSpec::new(1, "scores").rng();
        let s: Vec<f64> = (0..5_000).map(|_| rng.random()).collect();
        let c = qini_curve(&QiniInput::new(&y, &w, &s), 10, QiniMode::Approximate).unwrap();
        let d = diff_in_means(&y, &w).unwrap();
        let last = c.points.last().unwrap();
        assert_eq!(last.t, 1.0);
        assert_eq!(last.q.unwrap().to_bits(), d.value.to_bits());
        assert_eq!(last.variance_hat.unwrap().to_bits(), d.variance_hat.to_bits());
    }

    #[test]
    fn two_group_perfect_ranking() {
        // noiseless-in-expectation check on the ranking only: half the rows have
        // effect 0.2, and the truth curve is 0.2 t then flat at 0.1
        let n = 1000;
        let tau: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.2 } else { 0.0 }).collect();
        let truth = truth_qini_curve(&tau, &tau, 10).unwrap();
        for (t, q) in truth {
            let expect = if t <= 0.5 { 0.2 * t } else { 0.1 };
            assert!((q - expect).abs() < 1e-12, "t={t} q={q}");
        }
    }

    #[test]
    fn missing_arm_flagged() {
        // the top row is the only treated row among the top 10%
        let n = 20;
        let w: Vec<u8> = (0..n).map(|i| (i >= 10) as u8).collect();
        let y = vec![0u8; n];
        let s: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let c = qini_curve(&QiniInput::new(&y, &w, &s), 10, QiniMode::Approximate).unwrap();
        assert!(c.points[0].q.is_none());
        assert!(c.points[9].q.is_some());
        assert_eq!(c.n_missing(), 5);
    }

    #[test]
    fn nan_scores_rejected() {
        let r = qini_curve(&QiniInput::new(&[0, 1], &[0, 1], &[0.0, f64::NAN]), 2, QiniMode::Approximate);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn hs_full_share_is_stratified() {
        let n = 4_000;
        let (y, w, _) = rct(n, 2, |i| if i % 3 == 0 { 0.1 } else { 0.0 });
        let labels: Vec<Stratum> = (0..n)
            .map(|i| if i % 5 == 0 { Stratum::High } else { Stratum::Low })
            .collect();
        let mut rng = SeedSpec::new(2, "scores").rng();
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let r = Reference { scores: &s, labels: &labels };
        let c = hs_qini_curve(&QiniInput::new(&y, &w, &s), &labels, &r, 10, QiniMode::Approximate).unwrap();
        let st = stratified_ate(&y, &w, &labels, 0.2).unwrap();
        assert_eq!(c.points[9].q.unwrap().to_bits(), st.value.to_bits());
        assert_eq!(c.correction, Correction::Hs);
    }

    #[test]
    fn hs_self_reference_matches_uniform_when_labels_trivial() {
        let n = 3_000;
        let (y, w, _) = rct(n, 3, |i| (i % 7) as f64 * 0.02);
        let labels = vec![Stratum::Low; n];
        let s: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64).collect();
        let r = Reference { scores: &s, labels: &labels };
        let inp = QiniInput::new(&y, &w, &s);
        let a = hs_qini_curve(&inp, &labels, &r, 10, QiniMode::Approximate).unwrap();
        let b = qini_curve(&inp, 10, QiniMode::Approximate).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((p.q.unwrap() - q.q.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_auq_enumeration() {
        // scores equal the effects on an 11-point grid, each value once
        let tau: Vec<f64> = (0..=10).map(|k| k as f64 / 100.0).collect();
        let a = auq_oracle(&tau, &tau).unwrap();
        let n = tau.len() as f64;
        let expect: f64 = tau
            .iter()
            .enumerate()
            .map(|(i, t)| (i + 1) as f64 / n * t)
            .sum::<f64>()
            / n;
        assert!((a.value - expect).abs() < 1e-15);
        assert_eq!(auq_oracle(&tau, &[0.0; 11]).unwrap().value, 0.0);
    }

    #[test]
    fn midranks_for_ties() {
        let f = midrank_cdf(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(f, vec![3.5 / 4.0, 0.25, 3.5 / 4.0, 0.5]);
    }

    #[test]
    fn decile_auq_with_constant_scores() {
        // every slice estimates the same effect a, so the sum is a (T+1)/(2T)
        let n = 1_000;
        let w: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y: Vec<u8> = w.clone();
        let s = vec![0.5; n];
        for t in [1usize, 4, 10] {
            let a = auq_decile(&QiniInput::new(&y, &w, &s), t).unwrap();
            let expect = (t + 1) as f64 / (2 * t) as f64;
            assert!((a.value - expect).abs() < 1e-12, "T={t}: {}", a.value);
        }
    }

    #[test]
    fn decile_auq_two_groups() {
        // effect 0.2 on the top half: area 0.075 plus 0.05/T from the slice grid
        let n = 2_000;
        let w: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        // within-arm outcomes make each slice's difference exactly its effect
        let s: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let adj: Vec<f64> = (0..n)
            .map(|i| if i < n / 2 && w[i] == 1 { -0.2 } else { 0.0 })
            .collect();
        let y = vec![0u8; n];
        let a = auq_decile(&QiniInput::new(&y, &w, &s).adjusted(&adj), 10).unwrap();
        assert!((a.value - (0.075 + 0.005)).abs() < 1e-12, "{}", a.value);
    }

    #[test]
    fn downsampled_reference_is_proportional() {
        let labels: Vec<Stratum> = (0..1000)
            .map(|i| if i < 400 { Stratum::High } else { Stratum::Low })
            .collect();
        let keep = downsample_reference(&labels, 0.1, &SeedSpec::new(1, "d")).unwrap();
        let high = keep.iter().filter(|&&i| labels[i] == Stratum::High).count();
        assert_eq!(keep.len() - high, 600);
        assert_eq!(high, 67);
    }

    #[test]
    fn ties_reported() {
        assert_eq!(tie_fraction(&[1.0, 2.0, 2.0, 3.0]), 0.5);
        assert_eq!(tie_fraction(&[1.0, 2.0]), 0.0);
    }
}
