//! Small descriptive and rank statistics used by reports and tests.

use statrs::distribution::{ContinuousCDF, Normal};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolated quantile, `p` in `[0, 1]`. Sorts `xs` in place.
pub fn quantile(xs: &mut [f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    xs[lo] * (1.0 - t) + xs[hi] * t
}

pub fn median(xs: &mut [f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Average ranks (1-based) with ties sharing the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// One-sided Mann–Whitney U test that `a` tends to exceed `b`, normal
/// approximation with tie correction. Returns the p-value.
pub fn mann_whitney_greater(a: &[f64], b: &[f64]) -> f64 {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let r = ranks(&all);
    let r1: f64 = r[..a.len()].iter().sum();
    let u1 = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;

    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = (u1 - n1 * n2 / 2.0) / var.sqrt();
    1.0 - Normal::standard().cdf(z)
}

/// Exact one-sided Wilcoxon signed-rank test that the paired differences
/// `d` are positive. Zero differences are dropped. Exhaustive for n <= 20.
pub fn wilcoxon_signed_rank_greater(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|x| *x != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return 1.0;
    }
    assert!(n <= 20, "exact signed-rank test limited to 20 pairs");
    let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    let r = ranks(&abs);
    let w_obs: f64 = nz
        .iter()
        .zip(&r)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, rk)| *rk)
        .sum();
    let mut hits = 0u64;
    let total = 1u64 << n;
    for mask in 0..total {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum();
        if w >= w_obs - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0];
        assert_eq!(median(&mut v), 2.5);
        assert_eq!(quantile(&mut v, 0.0), 1.0);
        assert_eq!(quantile(&mut v, 1.0), 4.0);
    }

    #[test]
    fn signed_rank_all_positive() {
        let d: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert!((wilcoxon_signed_rank_greater(&d) - 1.0 / 1024.0).abs() < 1e-12);
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        assert_eq!(wilcoxon_signed_rank_greater(&neg), 1.0);
    }

    #[test]
    fn mann_whitney_separates_shifted_samples() {
        let a: Vec<f64> = (0..200).map(|i| i as f64 + 50.0).collect();
        let b: Vec<f64> = (0..200).map(|i| i as f64).collect();
        assert!(mann_whitney_greater(&a, &b) < 1e-6);
        assert!(mann_whitney_greater(&b, &a) > 0.99);
        let p = mann_whitney_greater(&b, &b);
        assert!((p - 0.5).abs() < 1e-9);
    }
}
