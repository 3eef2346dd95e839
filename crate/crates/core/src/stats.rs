//! t-based inference and sample moment summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Two-sided t test and confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub t_stat: f64,
    pub p_value: f64,
    pub critical_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub df: usize,
}

/// Two-sided p-value and (1 − α) interval `estimate ± t⁻¹(1 − α/2, df) · se`.
pub fn infer(estimate: f64, se: f64, df: usize, alpha: f64) -> Inference {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    assert!(df > 0, "degrees of freedom must be positive");
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("valid t distribution");
    let t_stat = estimate / se;
    let p_value = if t_stat == 0.0 {
        1.0
    } else {
        (2.0 * dist.sf(t_stat.abs())).min(1.0)
    };
    let critical_value = dist.inverse_cdf(1.0 - alpha / 2.0);
    Inference {
        t_stat,
        p_value,
        critical_value,
        ci_low: estimate - critical_value * se,
        ci_high: estimate + critical_value * se,
        alpha,
        df,
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard deviation with divisor n − 1.
pub fn sample_sd(xs: &[f64]) -> f64 {
    let mu = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - mu).powi(2)).sum();
    (ss / (xs.len() as f64 - 1.0)).sqrt()
}

fn central_moment(xs: &[f64], k: i32) -> f64 {
    let mu = mean(xs);
    xs.iter().map(|x| (x - mu).powi(k)).sum::<f64>() / xs.len() as f64
}

/// Moment-ratio skewness m₃ / m₂^{3/2}.
pub fn skewness(xs: &[f64]) -> f64 {
    central_moment(xs, 3) / central_moment(xs, 2).powf(1.5)
}

/// m₄ / m₂² − 3.
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    central_moment(xs, 4) / central_moment(xs, 2).powi(2) - 3.0
}
