use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedRank {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Non-zero differences used.
    pub n: usize,
    /// `P(W+ >= observed)` under the null, enumerated exactly.
    pub p_value: f64,
}

/// Exact one-sided Wilcoxon signed-rank test that `a` tends to exceed `b`.
///
/// Zero differences are dropped, tied magnitudes get average ranks, and the
/// null distribution is enumerated over all `2^n` sign patterns of those
/// ranks, so ties are handled exactly.
pub fn wilcoxon_greater(a: &[f64], b: &[f64]) -> Result<SignedRank> {
    if a.len() != b.len() {
        return Err(Error::domain("paired samples differ in length"));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("non-finite difference"));
    }
    let n = d.len();
    if n > 24 {
        return Err(Error::domain(format!("exact enumeration supports at most 24 pairs, got {n}")));
    }
    if n == 0 {
        return Ok(SignedRank { w_plus: 0.0, n, p_value: 1.0 });
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].fill(avg);
        i = j + 1;
    }
    // Doubled ranks are integers even with averaging.
    let twice: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
    let observed: u64 = d.iter().zip(&twice).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let mut at_least = 0u64;
    for mask in 0u64..(1 << n) {
        let s: u64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| twice[k]).sum();
        if s >= observed {
            at_least += 1;
        }
    }
    Ok(SignedRank {
        w_plus: observed as f64 / 2.0,
        n,
        p_value: at_least as f64 / (1u64 << n) as f64,
    })
}
