//! One-sided Wilcoxon signed-rank test of `H1: post < pre`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_LIMIT: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of the positive `pre - post` differences.
    pub w_plus: f64,
    pub n_effective: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks of `values` (1-based, ties share their average rank).
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Number of sign assignments reaching each doubled rank sum.
fn signed_rank_counts(doubled: &[usize]) -> Vec<f64> {
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Tests whether `post` tends to be smaller than `pre`. Zero differences are
/// dropped; ties use midranks. The null distribution is enumerated exactly
/// for up to [`EXACT_LIMIT`] pairs and approximated by a normal with
/// continuity and tie corrections beyond that.
pub fn wilcoxon_one_sided(pre: &[f64], post: &[f64]) -> Result<WilcoxonResult> {
    if pre.len() != post.len() {
        return Err(Error::InvalidParameter(format!(
            "paired samples differ in length: {} vs {}",
            pre.len(),
            post.len()
        )));
    }
    if let Some(v) = pre.iter().chain(post).find(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite measurement {v}")));
    }
    let diffs: Vec<f64> = pre.iter().zip(post).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Err(Error::EmptyInput("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= EXACT_LIMIT {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let counts = signed_rank_counts(&doubled);
        let w2 = (2.0 * w_plus).round() as usize;
        let upper: f64 = counts[w2..].iter().sum();
        let p_value = upper / 2f64.powi(n as i32);
        return Ok(WilcoxonResult { w_plus, n_effective: n, p_value, exact: true });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w_plus - mean - 0.5) / var.sqrt();
    let p_value = 1.0 - Normal::standard().cdf(z);
    Ok(WilcoxonResult { w_plus, n_effective: n, p_value, exact: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn counts_cover_all_assignments() {
        let c = signed_rank_counts(&[2, 4, 6]);
        assert_eq!(c.iter().sum::<f64>(), 8.0);
        assert_eq!(c[0], 1.0);
        assert_eq!(c[12], 1.0);
        assert_eq!(c[6], 2.0);
    }

    #[test]
    fn all_positive_small_sample() {
        let r = wilcoxon_one_sided(&[2.0, 3.0, 4.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.w_plus, 6.0);
        assert_eq!(r.p_value, 0.125);
    }

    #[test]
    fn zeros_are_dropped() {
        let r = wilcoxon_one_sided(&[1.0, 2.0, 5.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(r.n_effective, 2);
        assert!(wilcoxon_one_sided(&[1.0], &[1.0]).is_err());
        assert!(wilcoxon_one_sided(&[1.0], &[]).is_err());
    }

    #[test]
    fn normal_branch_is_close_to_exact() {
        let pre: Vec<f64> = (0..30).map(|i| 1.0 + i as f64 * 0.1).collect();
        let post: Vec<f64> = (0..30).map(|i| if i % 3 == 0 { 2.5 } else { 0.8 + i as f64 * 0.05 }).collect();
        let approx = wilcoxon_one_sided(&pre, &post).unwrap();
        assert!(!approx.exact);
        let ranks = midranks(&pre.iter().zip(&post).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>());
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let counts = signed_rank_counts(&doubled);
        let w2 = (2.0 * approx.w_plus).round() as usize;
        let exact = counts[w2..].iter().sum::<f64>() / 2f64.powi(30);
        assert!((approx.p_value - exact).abs() < 5e-3, "{} vs {exact}", approx.p_value);
    }
}
