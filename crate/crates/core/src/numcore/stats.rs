//! Summary statistics and the small set of hypothesis tests the reports use.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Variance with the `n − 1` denominator. `None` for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some(xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64)
}

pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    sample_variance(xs).map(f64::sqrt)
}

/// Standard deviation with the `n` denominator.
pub fn population_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchT {
    pub t: f64,
    pub df: f64,
}

/// Welch's unequal-variance t statistic with Welch–Satterthwaite degrees of
/// freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchT> {
    let (Some(va), Some(vb)) = (sample_variance(a), sample_variance(b)) else {
        return Err(Error::arg("welch_t needs at least two values per group"));
    };
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (qa, qb) = (va / na, vb / nb);
    let pooled = qa + qb;
    if pooled == 0.0 {
        return Err(Error::Degenerate("welch_t with zero variance in both groups".into()));
    }
    let t = (mean(a) - mean(b)) / pooled.sqrt();
    let df = pooled * pooled / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    Ok(WelchT { t, df })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson needs equally long inputs"));
    }
    if x.len() < 2 {
        return Err(Error::arg("pearson needs at least two points"));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation with a constant input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman needs equally long inputs"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PairedT {
    Test { t: f64, df: f64, p: f64 },
    /// Every difference is the same value, so the statistic is undefined.
    ConstantDifference { difference: f64 },
}

/// Two-sided paired t-test on `a[i] − b[i]`.
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<PairedT> {
    if a.len() != b.len() {
        return Err(Error::shape("paired_t needs equally long inputs"));
    }
    if a.len() < 2 {
        return Err(Error::arg("paired_t needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&v| v == d[0]) {
        return Ok(PairedT::ConstantDifference { difference: d[0] });
    }
    let n = d.len() as f64;
    let sd = sample_sd(&d).expect("n >= 2");
    let t = mean(&d) / (sd / n.sqrt());
    let df = n - 1.0;
    Ok(PairedT::Test { t, df, p: two_sided_p(t, df) })
}

/// Two-sided tail probability of Student's t.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_on_shifted_triples() {
        let w = welch_t(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        // Both variances are 1, so the standard error is sqrt(2/3) and
        // df = (2/3)² / (2·(1/3)²/2) = 4.
        assert!((w.t + 3.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((w.df - 4.0).abs() < 1e-12);
    }

    #[test]
    fn welch_zero_variance_is_degenerate() {
        assert!(matches!(welch_t(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn two_point_correlation_is_one() {
        assert!((pearson(&[60.0, 62.0], &[50.0, 55.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn paired_constant_difference_is_flagged() {
        let r = paired_t(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(r, PairedT::ConstantDifference { difference: 1.0 });
    }

    #[test]
    fn paired_p_value_is_symmetric() {
        let PairedT::Test { p, .. } = paired_t(&[1.0, 2.5, 3.0], &[0.0, 1.0, 2.8]).unwrap() else {
            panic!()
        };
        assert!(p > 0.0 && p < 1.0);
        assert!((two_sided_p(1.3, 4.0) - two_sided_p(-1.3, 4.0)).abs() < 1e-15);
    }
}
