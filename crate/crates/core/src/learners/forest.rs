//! Bagged CART trees.
//!
//! Splits minimize the within-node sum of squared errors, which on a 0/1
//! target is the Gini criterion up to a constant factor, so the same grower
//! serves probability and regression forests. Candidate thresholds are the
//! cut points of per-feature quantile bins (at most 256 bins; exact when a
//! feature has no more than 256 distinct values).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::frame::FeatureMatrix;
use crate::math::{round, sqrt};
use crate::rng::SeedSpec;

const MAX_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Share of features tried at each split; `None` means `sqrt(d) / d`.
    pub feature_fraction: Option<f64>,
    /// Bootstrap size as a share of the training rows (drawn with replacement).
    pub row_fraction: f64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 8,
            min_leaf: 25,
            feature_fraction: None,
            row_fraction: 1.0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        if self.n_trees == 0
            || self.max_depth == 0
            || self.min_leaf == 0
            || !frac_ok(self.row_fraction)
            || !self.feature_fraction.is_none_or(frac_ok)
        {
            return Err(Error::Validation(format!("invalid forest parameters {self:?}")));
        }
        Ok(())
    }

    fn features_per_split(&self, d: usize) -> usize {
        let frac = self
            .feature_fraction
            .unwrap_or_else(|| sqrt(d as f64) / d as f64);
        (round(frac * d as f64) as usize).clamp(1, d)
    }
}

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
struct Node {
    feature: u32,
    threshold: f64,
    left: u32,
    right: u32,
    value: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    #[inline]
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            let n = &self.nodes[at];
            if n.feature == LEAF {
                return n.value;
            }
            at = if row[n.feature as usize] <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.feature == LEAF).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
}

impl Forest {
    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Vec<f64> {
        let n = x.n_rows();
        let mut out = vec![0.0; n];
        for tree in &self.trees {
            for (i, o) in out.iter_mut().enumerate() {
                *o += tree.predict_row(x.row(i));
            }
        }
        let k = self.trees.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
        out
    }
}

/// Column-major bin codes plus the cut points that produced them.
struct Binned {
    n_rows: usize,
    codes: Vec<u8>,
    edges: Vec<Vec<f64>>,
}

impl Binned {
    fn new(x: &FeatureMatrix) -> Self {
        let n = x.n_rows();
        let d = x.n_cols();
        let mut codes = vec![0u8; n * d];
        let mut edges = Vec::with_capacity(d);
        let mut col = Vec::with_capacity(n);
        for f in 0..d {
            col.clear();
            col.extend((0..n).map(|i| x.get(i, f)));
            let mut sorted = col.clone();
            sorted.sort_unstable_by(f64::total_cmp);
            let mut uniq = sorted.clone();
            uniq.dedup();
            let cuts: Vec<f64> = if uniq.len() <= MAX_BINS {
                uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
            } else {
                let mut c: Vec<f64> = (1..MAX_BINS)
                    .map(|k| sorted[k * n / MAX_BINS])
                    .collect();
                c.dedup();
                c
            };
            let base = f * n;
            for (i, &v) in col.iter().enumerate() {
                codes[base + i] = cuts.partition_point(|&e| e < v) as u8;
            }
            edges.push(cuts);
        }
        Self {
            n_rows: n,
            codes,
            edges,
        }
    }

    #[inline]
    fn column(&self, f: usize) -> &[u8] {
        &self.codes[f * self.n_rows..(f + 1) * self.n_rows]
    }
}

struct Split {
    feature: usize,
    bin: usize,
    score: f64,
}

struct Grower<'a> {
    binned: &'a Binned,
    y: &'a [f64],
    params: &'a ForestParams,
    mtry: usize,
    counts: [u32; MAX_BINS],
    sums: [f64; MAX_BINS],
}

impl Grower<'_> {
    fn best_split(
        &mut self,
        rows: &[u32],
        total: f64,
        features: &[usize],
    ) -> Option<Split> {
        let n = rows.len();
        let min_leaf = self.params.min_leaf;
        let parent = total * total / n as f64;
        let mut best: Option<Split> = None;
        for &f in features {
            let nbins = self.binned.edges[f].len() + 1;
            if nbins < 2 {
                continue;
            }
            self.counts[..nbins].fill(0);
            self.sums[..nbins].fill(0.0);
            let col = self.binned.column(f);
            for &r in rows {
                let b = col[r as usize] as usize;
                self.counts[b] += 1;
                self.sums[b] += self.y[r as usize];
            }
            let (mut nl, mut sl) = (0usize, 0.0f64);
            for b in 0..nbins - 1 {
                nl += self.counts[b] as usize;
                sl += self.sums[b];
                if nl < min_leaf {
                    continue;
                }
                let nr = n - nl;
                if nr < min_leaf {
                    break;
                }
                let sr = total - sl;
                let score = sl * sl / nl as f64 + sr * sr / nr as f64;
                if score > parent + 1e-12 && best.as_ref().is_none_or(|s| score > s.score) {
                    best = Some(Split {
                        feature: f,
                        bin: b,
                        score,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: &mut [u32], rng: &mut crate::rng::Rng) -> Tree {
        let d = self.binned.edges.len();
        let mut nodes: Vec<Node> = Vec::new();
        // (node index, start, end, depth)
        let mut stack: Vec<(usize, usize, usize, usize)> = Vec::new();
        nodes.push(Node {
            feature: LEAF,
            threshold: 0.0,
            left: LEAF,
            right: LEAF,
            value: 0.0,
        });
        stack.push((0, 0, rows.len(), 0));
        while let Some((id, start, end, depth)) = stack.pop() {
            let slice = &mut rows[start..end];
            let n = slice.len();
            let (mut sum, mut sumsq) = (0.0, 0.0);
            for &r in slice.iter() {
                let v = self.y[r as usize];
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / n as f64;
            nodes[id].value = mean;
            let sse = sumsq - sum * mean;
            if depth >= self.params.max_depth || n < 2 * self.params.min_leaf || sse <= 1e-12 {
                continue;
            }
            let features = index::sample(rng, d, self.mtry).into_vec();
            let Some(split) = self.best_split(slice, sum, &features) else {
                continue;
            };
            let col = self.binned.column(split.feature);
            // in-place partition: rows with code <= bin go left
            let mut lo = 0;
            let mut hi = n;
            while lo < hi {
                if (col[slice[lo] as usize] as usize) <= split.bin {
                    lo += 1;
                } else {
                    hi -= 1;
                    slice.swap(lo, hi);
                }
            }
            let left = nodes.len();
            for _ in 0..2 {
                nodes.push(Node {
                    feature: LEAF,
                    threshold: 0.0,
                    left: LEAF,
                    right: LEAF,
                    value: 0.0,
                });
            }
            let node = &mut nodes[id];
            node.feature = split.feature as u32;
            node.threshold = self.binned.edges[split.feature][split.bin];
            node.left = left as u32;
            node.right = (left + 1) as u32;
            stack.push((left + 1, start + lo, end, depth + 1));
            stack.push((left, start, start + lo, depth + 1));
        }
        Tree { nodes }
    }
}

/// Fits a forest on real-valued targets. Each tree gets its own stream
/// `seed/tree#t`, so results do not depend on fitting order.
pub fn fit_forest(
    x: &FeatureMatrix,
    y: &[f64],
    params: &ForestParams,
    seed: &SeedSpec,
) -> Result<Forest> {
    params.validate()?;
    let n = x.n_rows();
    if y.len() != n {
        return Err(Error::Schema(format!("{} targets for {n} rows", y.len())));
    }
    if n == 0 || x.n_cols() == 0 {
        return Err(Error::Validation("forest needs at least one row and one feature".into()));
    }
    if n > u32::MAX as usize {
        return Err(Error::Validation("too many rows for a forest".into()));
    }
    let binned = Binned::new(x);
    let mut grower = Grower {
        binned: &binned,
        y,
        params,
        mtry: params.features_per_split(x.n_cols()),
        counts: [0; MAX_BINS],
        sums: [0.0; MAX_BINS],
    };
    let draws = (round(params.row_fraction * n as f64) as usize).max(1);
    let mut rows = vec![0u32; draws];
    let mut trees = Vec::with_capacity(params.n_trees);
    for t in 0..params.n_trees {
        let mut rng = seed.rng_at(t as u64);
        for r in rows.iter_mut() {
            *r = rng.random_range(0..n as u32);
        }
        trees.push(grower.grow(&mut rows, &mut rng));
    }
    Ok(Forest {
        trees,
        n_features: x.n_cols(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;

    fn one_feature(values: &[f64]) -> FeatureMatrix {
        FeatureMatrix::new(vec![String::from("x")], values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn stump_on_separable_data_has_two_values() {
        let xs: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let y: Vec<f64> = xs.iter().map(|&v| if v < 100.0 { 0.0 } else { 1.0 }).collect();
        let params = ForestParams {
            n_trees: 1,
            max_depth: 1,
            min_leaf: 1,
            ..Default::default()
        };
        let f = fit_forest(&one_feature(&xs), &y, &params, &SeedSpec::new(1, "t")).unwrap();
        let mut preds = f.predict(&one_feature(&xs));
        preds.sort_by(f64::total_cmp);
        preds.dedup();
        assert_eq!(preds.len(), 2);
        assert_eq!(f.trees()[0].n_leaves(), 2);
    }

    #[test]
    fn regression_tree_recovers_step() {
        let xs: Vec<f64> = (0..400).map(|i| i as f64 / 400.0).collect();
        let y: Vec<f64> = xs.iter().map(|&v| if v <= 0.5 { -0.3 } else { 0.7 }).collect();
        let params = ForestParams {
            n_trees: 5,
            max_depth: 3,
            min_leaf: 5,
            ..Default::default()
        };
        let f = fit_forest(&one_feature(&xs), &y, &params, &SeedSpec::new(2, "t")).unwrap();
        let p = f.predict(&one_feature(&[0.1, 0.9]));
        assert!((p[0] + 0.3).abs() < 1e-9, "{p:?}");
        assert!((p[1] - 0.7).abs() < 1e-9, "{p:?}");
    }

    #[test]
    fn many_distinct_values_are_binned() {
        let xs: Vec<f64> = (0..5000).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = Binned::new(&one_feature(&xs));
        assert!(b.edges[0].len() <= MAX_BINS - 1);
        for (i, &v) in xs.iter().enumerate() {
            let code = b.column(0)[i] as usize;
            if code < b.edges[0].len() {
                assert!(v <= b.edges[0][code]);
            }
            if code > 0 {
                assert!(v > b.edges[0][code - 1]);
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        let p = ForestParams {
            row_fraction: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = ForestParams {
            feature_fraction: Some(1.5),
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
