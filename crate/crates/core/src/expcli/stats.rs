//! Correlation coefficients and the exact rank-trend test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pearson correlation; NaN when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return f64::NAN;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i] - mx, y[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// 1-based ranks with ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Kendall's tau-b.
pub fn kendall(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).partial_cmp(&0.0).map(|o| o as i64).unwrap_or(0);
            let b = (y[i] - y[j]).partial_cmp(&0.0).map(|o| o as i64).unwrap_or(0);
            match (a, b) {
                (0, 0) => {}
                (0, _) => tx += 1,
                (_, 0) => ty += 1,
                _ if a == b => c += 1,
                _ => d += 1,
            }
        }
    }
    let n1 = (c + d + tx) as f64;
    let n2 = (c + d + ty) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return f64::NAN;
    }
    (c - d) as f64 / (n1 * n2).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub measure: String,
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
    /// Pairs used.
    pub n: usize,
    /// Rows dropped because the measure or the target was missing.
    pub excluded: usize,
}

/// Correlations of each column with `target`, pairwise dropping rows where
/// either value is missing or non-finite.
pub fn correlate(name: &str, values: &[Option<f64>], target: &[Option<f64>]) -> Correlation {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (a, b) in values.iter().zip(target) {
        if let (Some(a), Some(b)) = (a, b) {
            if a.is_finite() && b.is_finite() {
                x.push(*a);
                y.push(*b);
            }
        }
    }
    let n = x.len();
    let (p, s, k) = if n >= 3 {
        (pearson(&x, &y), spearman(&x, &y), kendall(&x, &y))
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Correlation {
        measure: name.to_string(),
        pearson: p,
        spearman: s,
        kendall: k,
        n,
        excluded: values.len() - n,
    }
}

/// Correlations for several named columns against one target; fails when
/// fewer than three rows are available.
pub fn correlations(columns: &[(String, Vec<Option<f64>>)], target: &[Option<f64>]) -> Result<Vec<Correlation>> {
    if target.len() < 3 {
        return Err(Error::InsufficientData(format!("{} rows, need at least 3", target.len())));
    }
    Ok(columns.iter().map(|(name, v)| correlate(name, v, target)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    /// Spearman correlation between position and value.
    pub rho: f64,
    /// Fraction of orderings with a correlation at least as large.
    pub p_value: f64,
}

/// Exact one-sided permutation test for an increasing trend in `values`
/// (taken in order), enumerating all orderings; at most 9 values.
pub fn increasing_trend_test(values: &[f64]) -> Result<TrendTest> {
    let n = values.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("{n} values, need at least 3")));
    }
    if n > 9 {
        return Err(Error::Config("exact enumeration is limited to 9 values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trend test input".into()));
    }
    let pos: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    let r = ranks(values);
    let rho = pearson(&pos, &r);
    let mut perm: Vec<usize> = (0..n).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    loop {
        let shuffled: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
        let v = pearson(&pos, &shuffled);
        total += 1;
        if v >= rho - 1e-12 {
            hits += 1;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(TrendTest {
        rho,
        p_value: hits as f64 / total as f64,
    })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| p[i] < p[i + 1]) else {
        return false;
    };
    let j = (i + 1..n).rev().find(|&j| p[j] > p[i]).expect("successor exists");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    #[test]
    fn identical_and_negated() {
        let g = [0.1, 0.5, 0.2, 0.9, 0.4];
        assert!((pearson(&g, &g) - 1.0).abs() < 1e-15);
        assert_eq!(spearman(&g, &g), 1.0);
        assert_eq!(kendall(&g, &g), 1.0);
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert!((pearson(&neg, &g) + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&neg, &g), -1.0);
        assert_eq!(kendall(&neg, &g), -1.0);
    }

    #[test]
    fn ties_and_tau_b() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // scipy.stats.kendalltau([1,2,2,3],[1,2,3,3]) = 0.8
        assert!((kendall(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 3.0]) - 0.8).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_nan());
    }

    #[test]
    fn independent_columns_are_weakly_correlated() {
        let mut rng = Rng::new(11, 0);
        let x = rng.normal_vec(100);
        let y = rng.normal_vec(100);
        assert!(pearson(&x, &y).abs() < 0.3);
    }

    #[test]
    fn pairwise_exclusion_and_insufficient_rows() {
        let t = vec![Some(1.0), Some(2.0), Some(3.0), Some(4.0)];
        let v = vec![Some(2.0), None, Some(6.0), Some(f64::NAN)];
        let c = correlate("v", &v, &t);
        assert_eq!((c.n, c.excluded), (2, 2));
        assert!(c.pearson.is_nan());
        assert!(matches!(correlations(&[], &t[..2]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn trend_test_exact() {
        let t = increasing_trend_test(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.rho, 1.0);
        assert!((t.p_value - 1.0 / 120.0).abs() < 1e-15);
        let t = increasing_trend_test(&[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(t.p_value, 1.0);
        assert!(increasing_trend_test(&[1.0, 2.0]).is_err());
    }
}
