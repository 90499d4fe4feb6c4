//! Data containers shared by every module.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::SeedSpec;

/// Dense row-major feature matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureMatrix {
    names: Vec<String>,
    n_rows: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>, n_rows: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * names.len() {
            return Err(Error::Schema(format!(
                "{} values do not fill {} rows x {} columns",
                data.len(),
                n_rows,
                names.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature value at row {}",
                pos / names.len().max(1)
            )));
        }
        Ok(Self {
            names,
            n_rows,
            data,
        })
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let d = names.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::Schema(format!(
                    "row {} has {} values, expected {}",
                    i,
                    r.len(),
                    d
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(names, rows.len(), data)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.names.len();
        &self.data[i * d..(i + 1) * d]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.names.len() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, col)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let d = self.names.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            names: self.names.clone(),
            n_rows: rows.len(),
            data,
        }
    }

    /// Copy with one extra column appended.
    pub fn with_column(&self, name: &str, values: &[f64]) -> Result<Self> {
        if values.len() != self.n_rows {
            return Err(Error::Schema(format!(
                "column {name} has {} values for {} rows",
                values.len(),
                self.n_rows
            )));
        }
        let d = self.names.len();
        let mut data = Vec::with_capacity(self.n_rows * (d + 1));
        for (i, v) in values.iter().enumerate() {
            data.extend_from_slice(self.row(i));
            data.push(*v);
        }
        let mut names = self.names.clone();
        names.push(name.into());
        Self::new(names, self.n_rows, data)
    }

    /// Checks that `other` carries the same feature names in the same order.
    pub fn check_names(&self, expected: &[String]) -> Result<()> {
        if self.names.as_slice() != expected {
            return Err(Error::Schema(format!(
                "feature columns {:?} do not match training columns {:?}",
                self.names, expected
            )));
        }
        Ok(())
    }
}

/// Features plus optional binary outcome and treatment columns.
///
/// Immutable once built; derived frames are new values.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PopulationFrame {
    features: FeatureMatrix,
    outcome: Option<Vec<u8>>,
    treatment: Option<Vec<u8>>,
    ids: Vec<u64>,
}

fn check_binary(name: &str, values: &[u8], ids: &[u64]) -> Result<()> {
    if let Some(i) = values.iter().position(|&v| v > 1) {
        return Err(Error::Validation(format!(
            "{name} value {} at row id {} is not 0 or 1",
            values[i], ids[i]
        )));
    }
    Ok(())
}

impl PopulationFrame {
    pub fn new(
        features: FeatureMatrix,
        outcome: Option<Vec<u8>>,
        treatment: Option<Vec<u8>>,
        ids: Option<Vec<u64>>,
    ) -> Result<Self> {
        let n = features.n_rows();
        let ids = ids.unwrap_or_else(|| (0..n as u64).collect());
        if ids.len() != n {
            return Err(Error::Schema(format!("{} ids for {n} rows", ids.len())));
        }
        for (name, col) in [("outcome", &outcome), ("treatment", &treatment)] {
            if let Some(v) = col {
                if v.len() != n {
                    return Err(Error::Schema(format!(
                        "{name} has {} values for {n} rows",
                        v.len()
                    )));
                }
                check_binary(name, v, &ids)?;
            }
        }
        Ok(Self {
            features,
            outcome,
            treatment,
            ids,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.n_rows()
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn outcome(&self) -> Option<&[u8]> {
        self.outcome.as_deref()
    }

    pub fn treatment(&self) -> Option<&[u8]> {
        self.treatment.as_deref()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn require_outcome(&self) -> Result<&[u8]> {
        self.outcome()
            .ok_or_else(|| Error::Schema("frame has no outcome column".into()))
    }

    pub fn require_treatment(&self) -> Result<&[u8]> {
        self.treatment()
            .ok_or_else(|| Error::Schema("frame has no treatment column".into()))
    }

    /// Outcome as `f64`, the form every estimator consumes.
    pub fn outcome_f64(&self) -> Result<Vec<f64>> {
        Ok(self.require_outcome()?.iter().map(|&y| y as f64).collect())
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(rows),
            outcome: self
                .outcome
                .as_ref()
                .map(|v| rows.iter().map(|&r| v[r]).collect()),
            treatment: self
                .treatment
                .as_ref()
                .map(|v| rows.iter().map(|&r| v[r]).collect()),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }

    pub fn with_outcome(&self, outcome: Vec<u8>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            Some(outcome),
            self.treatment.clone(),
            Some(self.ids.clone()),
        )
    }

    pub fn with_treatment(&self, treatment: Vec<u8>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.outcome.clone(),
            Some(treatment),
            Some(self.ids.clone()),
        )
    }

    /// Row indices with the given treatment value.
    pub fn arm_rows(&self, arm: u8) -> Result<Vec<usize>> {
        Ok(self
            .require_treatment()?
            .iter()
            .enumerate()
            .filter(|(_, &w)| w == arm)
            .map(|(i, _)| i)
            .collect())
    }
}

/// Analytic truth for simulated rows: `mu0 = E[y | x, w = 0]`, `tau = E[y | x, w = 1] - mu0`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimulatedTruth {
    mu0: Vec<f64>,
    tau: Vec<f64>,
}

impl SimulatedTruth {
    pub fn new(mu0: Vec<f64>, tau: Vec<f64>) -> Result<Self> {
        if mu0.len() != tau.len() {
            return Err(Error::Schema(format!(
                "mu0 has {} rows, tau has {}",
                mu0.len(),
                tau.len()
            )));
        }
        const EPS: f64 = 1e-12;
        for (i, (&m, &t)) in mu0.iter().zip(&tau).enumerate() {
            let m1 = m + t;
            if !(-EPS..=1.0 + EPS).contains(&m) || !(-EPS..=1.0 + EPS).contains(&m1) {
                return Err(Error::Validation(format!(
                    "row {i}: mu0={m}, mu0+tau={m1} outside [0,1]"
                )));
            }
        }
        Ok(Self { mu0, tau })
    }

    pub fn len(&self) -> usize {
        self.mu0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu0.is_empty()
    }

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    /// True ATE of these rows.
    pub fn ate(&self) -> f64 {
        crate::math::mean(&self.tau)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            mu0: rows.iter().map(|&r| self.mu0[r]).collect(),
            tau: rows.iter().map(|&r| self.tau[r]).collect(),
        }
    }
}

/// Disjoint random subsets of the requested sizes. Returns the row indices
/// of each part into `n_rows`.
pub fn split_indices(n_rows: usize, sizes: &[usize], seed: &SeedSpec) -> Result<Vec<Vec<usize>>> {
    let total: usize = sizes.iter().sum();
    if total > n_rows {
        return Err(Error::Validation(format!(
            "requested {total} rows across splits but only {n_rows} available"
        )));
    }
    let mut rng = seed.rng();
    let picked = index::sample(&mut rng, n_rows, total).into_vec();
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        let mut part = picked[start..start + s].to_vec();
        part.sort_unstable();
        out.push(part);
        start += s;
    }
    Ok(out)
}

/// Splits `frame` into disjoint random sub-frames of the requested sizes.
/// Row ids carry over so every part can be traced to the source.
pub fn split_frame(
    frame: &PopulationFrame,
    sizes: &[usize],
    seed: &SeedSpec,
) -> Result<Vec<PopulationFrame>> {
    Ok(split_indices(frame.n_rows(), sizes, seed)?
        .iter()
        .map(|rows| frame.select(rows))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn frame(n: usize) -> PopulationFrame {
        let names = vec!["f0".into()];
        let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
        PopulationFrame::new(
            FeatureMatrix::new(names, n, data).unwrap(),
            Some(vec![0; n]),
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn rejects_non_binary_outcome() {
        let names = vec!["f0".into()];
        let err = PopulationFrame::new(
            FeatureMatrix::new(names, 3, vec![0.0, 1.0, 2.0]).unwrap(),
            Some(vec![0, 2, 1]),
            None,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("row id 1")));
    }

    #[test]
    fn rejects_length_mismatch() {
        let names = vec!["f0".into()];
        let fm = FeatureMatrix::new(names, 2, vec![0.0, 1.0]).unwrap();
        assert!(PopulationFrame::new(fm, None, Some(vec![1]), None).is_err());
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let f = frame(10);
        let seed = SeedSpec::new(11, "split");
        let parts = split_frame(&f, &[4, 6], &seed).unwrap();
        assert_eq!(parts[0].n_rows(), 4);
        assert_eq!(parts[1].n_rows(), 6);
        for id in parts[0].ids() {
            assert!(!parts[1].ids().contains(id));
        }
        let again = split_frame(&f, &[4, 6], &seed).unwrap();
        assert_eq!(parts[0].ids(), again[0].ids());
        assert_eq!(parts[1].ids(), again[1].ids());
    }

    #[test]
    fn split_rejects_oversized_request() {
        let f = frame(10);
        assert!(split_frame(&f, &[7, 7], &SeedSpec::new(1, "s")).is_err());
    }

    #[test]
    fn truth_rejects_invalid_probabilities() {
        assert!(SimulatedTruth::new(vec![0.9], vec![0.2]).is_err());
        assert!(SimulatedTruth::new(vec![0.9], vec![-0.2]).is_ok());
    }
}
