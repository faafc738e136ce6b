//! Shared statistics: moments, Pearson correlation, modified Thompson Tau
//! outlier rejection, Welch's t-test, and seeded bootstrap intervals.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::seeding;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("sample length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (ddof = 1). Zero for fewer than two points.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Median of a sample; even-count median is the mean of the two central
/// values. `None` on empty input.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        Some(sorted[n / 2])
    } else {
        Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0)
    }
}

/// Pearson correlation coefficient between paired samples.
///
/// Computed with the online co-moment update, which keeps a single pass
/// numerically stable. Returns `Ok(None)` when the correlation is
/// undefined: fewer than two pairs, or either sample has zero variance.
pub fn pearson_rho(xs: &[f64], ys: &[f64]) -> Result<Option<f64>, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Ok(None);
    }
    let mut mean_x = 0.0;
    let mut mean_y = 0.0;
    let mut co_moment = 0.0;
    let mut m2_x = 0.0;
    let mut m2_y = 0.0;
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let k = (i + 1) as f64;
        let dx = x - mean_x;
        let dy = y - mean_y;
        mean_x += dx / k;
        mean_y += dy / k;
        co_moment += dx * (y - mean_y);
        m2_x += dx * (x - mean_x);
        m2_y += dy * (y - mean_y);
    }
    if m2_x == 0.0 || m2_y == 0.0 {
        return Ok(None);
    }
    Ok(Some((co_moment / (m2_x * m2_y).sqrt()).clamp(-1.0, 1.0)))
}

/// Two-sided Student-t critical value at significance `alpha`.
pub fn t_critical_two_sided(alpha: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("valid t distribution")
        .inverse_cdf(1.0 - alpha / 2.0)
}

/// Rejection threshold of the modified Thompson Tau test for a sample of
/// size `n`: `tau = t * (n-1) / (sqrt(n) * sqrt(n-2+t^2))` with
/// `t = t_{alpha/2, n-2}`.
pub fn thompson_tau_threshold(n: usize, alpha: f64) -> f64 {
    assert!(n >= 3, "tau threshold needs n >= 3");
    let t = t_critical_two_sided(alpha, (n - 2) as f64);
    t * (n - 1) as f64 / ((n as f64).sqrt() * ((n - 2) as f64 + t * t).sqrt())
}

/// Result of iterative modified Thompson Tau outlier rejection.
#[derive(Debug, Clone, PartialEq)]
pub struct TauRejection {
    /// Points that survived, in input order.
    pub retained: Vec<f64>,
    /// Rejected points, in rejection order (most extreme first).
    pub rejected: Vec<f64>,
    /// Number of removal rounds performed.
    pub rounds: usize,
}

/// Iterative modified Thompson Tau outlier rejection.
///
/// Each round computes the mean and sample SD of the remaining points and
/// removes the single most extreme point if its absolute deviation exceeds
/// `tau(n) * sd`; rounds repeat until nothing is rejected or fewer than
/// three points remain. Inputs with fewer than three points are returned
/// unchanged. Ties on deviation keep the earliest point.
pub fn reject_outliers_tau(xs: &[f64], alpha: f64) -> TauRejection {
    let mut retained: Vec<f64> = xs.to_vec();
    let mut rejected = Vec::new();
    let mut rounds = 0;
    while retained.len() >= 3 {
        let m = mean(&retained);
        let sd = sample_sd(&retained);
        if sd == 0.0 {
            break;
        }
        let threshold = thompson_tau_threshold(retained.len(), alpha) * sd;
        let (idx, dev) = retained
            .iter()
            .enumerate()
            .map(|(i, x)| (i, (x - m).abs()))
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            });
        if dev > threshold {
            rejected.push(retained.remove(idx));
            rounds += 1;
        } else {
            break;
        }
    }
    TauRejection {
        retained,
        rejected,
        rounds,
    }
}

/// Two-sided Welch two-sample t-test p-value.
///
/// `None` when either sample has fewer than two points. When both samples
/// have zero variance the p-value degenerates to 1 (equal means) or 0.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Some(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / (va * va / (na * na * (na - 1.0)) + vb * vb / (nb * nb * (nb - 1.0)));
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    Some((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

/// Seeded percentile bootstrap 95% CI for the mean of `values`.
///
/// Resamples `values` with replacement `resamples` times; interval is the
/// 2.5/97.5 percentile of resampled means, widened if necessary to contain
/// the point estimate. `None` for fewer than two values.
pub fn bootstrap_mean_ci95(values: &[f64], resamples: usize, seed: u64) -> Option<(f64, f64)> {
    if values.len() < 2 || resamples == 0 {
        return None;
    }
    let mut rng = seeding::rng(seed, 0);
    let n = values.len();
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += values[rng.random_range(0..n)];
        }
        means.push(sum / n as f64);
    }
    means.sort_by(|a, b| a.total_cmp(b));
    let lower_idx = (0.025 * resamples as f64) as usize;
    let upper_idx = ((0.975 * resamples as f64) as usize).min(resamples - 1);
    let estimate = mean(values);
    Some((means[lower_idx].min(estimate), means[upper_idx].max(estimate)))
}
