//! Float helpers backed by `libm`, so the crate builds without `std`.

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

/// Logistic sigmoid, evaluated without overflow for large |z|.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + exp(-z))
    } else {
        let e = exp(z);
        e / (1.0 + e)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Variance with denominator `n` (population convention).
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Variance with denominator `n - 1`; zero for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Pearson correlation; zero when either side has no spread.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = mean(&a[..n]);
    let mb = mean(&b[..n]);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let da = a[i] - ma;
        let db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / sqrt(saa * sbb)
}

/// Index of the `(1 - share)` order statistic, 1-based rank `ceil((1 - share) * n)`
/// clamped to `[1, n]`, returned 0-based.
///
/// A small slack absorbs representation error in grids such as `j / 100`.
pub fn upper_quantile_index(share: f64, n: usize) -> usize {
    let rank = ceil((1.0 - share) * n as f64 - 1e-9);
    let rank = if rank < 1.0 { 1 } else { rank as usize };
    rank.min(n) - 1
}

/// Number of top-ranked rows making up a share `t` of `n` rows.
pub fn top_count(t: f64, n: usize) -> usize {
    let c = ceil(t * n as f64 - 1e-9);
    if c < 0.0 {
        0
    } else {
        (c as usize).min(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn quantile_index_convention() {
        // ceil(0.75 * 4) = 3 -> 0-based 2
        assert_eq!(upper_quantile_index(0.25, 4), 2);
        // grid values that are not exactly representable
        assert_eq!(upper_quantile_index(0.07, 100), 92);
        assert_eq!(upper_quantile_index(0.999, 10), 0);
        assert_eq!(top_count(0.1, 20_000), 2_000);
        assert_eq!(top_count(1.0, 7), 7);
    }
}
