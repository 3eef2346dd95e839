//! Weighted least squares for the working model
//!
//! ```text
//! y_ij = β₀ + β₁ (T_j − p*) + (x_ij − x̄) γ + u_ij
//! ```
//!
//! fit on individual records with weights w_ij, and the design-based variance
//! estimator built from residuals averaged to the cluster level:
//!
//! ```text
//! Var(β̂₁) = (s²(1)/m¹ + s²(0)/m⁰) / (1 − R²)
//! ```
//!
//! with arm terms normalized by (m¹ − kp* − 1)(w̄¹)² and (m⁰ − k(1 − p*) − 1)(w̄⁰)².

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{aggregate, ClusterFrame, StudyFrame, TREATMENT_COLUMN};
use crate::diagnostics::{individual_r2, r2_treatment_on_covariates};
use crate::error::{Error, Result};
use crate::linalg::weighted_lstsq;
use crate::stats::{infer, Inference};

/// How the R² of treatment on covariates is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Weighting {
    /// w_ij-weighted regression of T̃_j on the centered individual covariates.
    #[default]
    Individual,
    /// w_j-weighted regression of T̃_j on centered cluster covariate means.
    ClusterWeights,
    /// Unweighted regression with intercept.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WlsFit {
    pub beta0: f64,
    /// The ATE estimate.
    pub beta1: f64,
    pub gamma: Vec<f64>,
    pub covariate_subset: Vec<usize>,
    pub covariate_names: Vec<String>,
    /// ē_j = ȳ_j − β̂₀ − β̂₁T̃_j − x̃_j γ̂ per cluster.
    pub cluster_residuals: Vec<f64>,
    pub p_star: f64,
    /// R² of T̃_j on the individual covariates; NaN if not computable.
    pub r2_individual: f64,
}

/// Degrees-of-freedom preconditions m¹ − kp* − 1 > 0 and m⁰ − k(1 − p*) − 1 > 0.
pub fn check_df(cf: &ClusterFrame, k: usize) -> Result<()> {
    let k = k as f64;
    let need1 = k * cf.p_star + 1.0;
    if cf.m1 as f64 - need1 <= 0.0 {
        return Err(Error::InsufficientDf {
            arm: "treatment",
            required: need1,
            available: cf.m1 as f64,
        });
    }
    let need0 = k * (1.0 - cf.p_star) + 1.0;
    if cf.m0 as f64 - need0 <= 0.0 {
        return Err(Error::InsufficientDf {
            arm: "control",
            required: need0,
            available: cf.m0 as f64,
        });
    }
    Ok(())
}

pub fn fit_wls(frame: &StudyFrame, subset: &[usize]) -> Result<WlsFit> {
    fit_wls_with(frame, &aggregate(frame), subset)
}

/// [`fit_wls`] reusing an existing aggregation of `frame`.
pub fn fit_wls_with(frame: &StudyFrame, cf: &ClusterFrame, subset: &[usize]) -> Result<WlsFit> {
    let v = frame.v();
    if let Some(&q) = subset.iter().find(|&&q| q >= v) {
        return Err(Error::UnknownCovariate(format!("index {q}")));
    }
    let k = subset.len();
    check_df(cf, k)?;
    let n = frame.n();
    let treated = frame.treated();
    let cluster_of = frame.cluster_of();
    let tt: Vec<f64> = treated
        .iter()
        .map(|&t| if t { 1.0 } else { 0.0 } - cf.p_star)
        .collect();
    let x = DMatrix::from_fn(n, k + 2, |i, c| match c {
        0 => 1.0,
        1 => tt[cluster_of[i]],
        _ => {
            let q = subset[c - 2];
            frame.x(i, q) - cf.xbar_grand[q]
        }
    });
    let mut names = vec!["intercept".to_string(), TREATMENT_COLUMN.to_string()];
    names.extend(subset.iter().map(|&q| frame.covariate_names()[q].clone()));
    let beta = weighted_lstsq(x, frame.y(), frame.w(), &names)?;
    let gamma: Vec<f64> = beta.iter().skip(2).copied().collect();
    let cluster_residuals = (0..cf.m)
        .map(|j| {
            let xg: f64 = subset
                .iter()
                .zip(&gamma)
                .map(|(&q, g)| (cf.xbar[j * v + q] - cf.xbar_grand[q]) * g)
                .sum();
            cf.ybar[j] - beta[0] - beta[1] * tt[j] - xg
        })
        .collect();
    Ok(WlsFit {
        beta0: beta[0],
        beta1: beta[1],
        gamma,
        covariate_subset: subset.to_vec(),
        covariate_names: names[2..].to_vec(),
        cluster_residuals,
        p_star: cf.p_star,
        r2_individual: individual_r2(frame, cf, subset),
    })
}

/// ATE estimate with its design-based standard error and t inference on
/// m − k − 2 degrees of freedom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub estimate: f64,
    pub se: f64,
    pub variance: f64,
    pub df: usize,
    pub t_stat: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub critical_value: f64,
    pub s2_1: f64,
    pub s2_0: f64,
    pub r2_tx: f64,
    pub k: usize,
    pub covariates: Vec<String>,
}

impl AteEstimate {
    /// Recomputes the test and interval at a different level.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        let inf = infer(self.estimate, self.se, self.df, alpha);
        Self {
            t_stat: inf.t_stat,
            p_value: inf.p_value,
            ci_low: inf.ci_low,
            ci_high: inf.ci_high,
            alpha,
            critical_value: inf.critical_value,
            ..self.clone()
        }
    }

    pub fn inference(&self) -> Inference {
        Inference {
            t_stat: self.t_stat,
            p_value: self.p_value,
            critical_value: self.critical_value,
            ci_low: self.ci_low,
            ci_high: self.ci_high,
            alpha: self.alpha,
            df: self.df,
        }
    }
}

pub fn designbased_se(
    fit: &WlsFit,
    cf: &ClusterFrame,
    r2_weighting: R2Weighting,
    alpha: f64,
) -> Result<AteEstimate> {
    let k = fit.covariate_subset.len();
    check_df(cf, k)?;
    let kf = k as f64;
    let (mut ss1, mut ss0) = (0.0, 0.0);
    for j in 0..cf.m {
        let term = (cf.weights[j] * fit.cluster_residuals[j]).powi(2);
        if cf.treated[j] {
            ss1 += term;
        } else {
            ss0 += term;
        }
    }
    let s2_1 = ss1 / ((cf.m1 as f64 - kf * cf.p_star - 1.0) * cf.wbar1 * cf.wbar1);
    let s2_0 = ss0 / ((cf.m0 as f64 - kf * (1.0 - cf.p_star) - 1.0) * cf.wbar0 * cf.wbar0);
    let r2 = match r2_weighting {
        R2Weighting::Individual if k > 0 => {
            let r2 = fit.r2_individual;
            if !(r2 < 1.0 - 1e-10) {
                return Err(Error::DegenerateRSquared(r2));
            }
            r2.max(0.0)
        }
        R2Weighting::Individual => 0.0,
        other => r2_treatment_on_covariates(cf, &fit.covariate_subset, other)?,
    };
    let variance = (s2_1 / cf.m1 as f64 + s2_0 / cf.m0 as f64) / (1.0 - r2);
    if !(variance.is_finite() && variance > 0.0) {
        return Err(Error::DegenerateVariance(variance));
    }
    let se = variance.sqrt();
    let df = cf.m - k - 2;
    let inf = infer(fit.beta1, se, df, alpha);
    Ok(AteEstimate {
        estimate: fit.beta1,
        se,
        variance,
        df,
        t_stat: inf.t_stat,
        p_value: inf.p_value,
        ci_low: inf.ci_low,
        ci_high: inf.ci_high,
        alpha,
        critical_value: inf.critical_value,
        s2_1,
        s2_0,
        r2_tx: r2,
        k,
        covariates: fit.covariate_names.clone(),
    })
}

/// Fit plus standard error in one call.
pub fn estimate_ate(
    frame: &StudyFrame,
    cf: &ClusterFrame,
    subset: &[usize],
    r2_weighting: R2Weighting,
    alpha: f64,
) -> Result<AteEstimate> {
    let fit = fit_wls_with(frame, cf, subset)?;
    designbased_se(&fit, cf, r2_weighting, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IndividualRecord;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    fn frame(rows: &[(&str, bool, f64, f64, &[f64])], names: &[&str]) -> StudyFrame {
        let mut assignment = BTreeMap::new();
        let records = rows
            .iter()
            .map(|(c, t, y, w, x)| {
                assignment.insert(c.to_string(), *t);
                IndividualRecord {
                    cluster_id: c.to_string(),
                    y: *y,
                    x: x.to_vec(),
                    w: *w,
                }
            })
            .collect();
        StudyFrame::from_records(records, &assignment, names.iter().map(|s| s.to_string()).collect())
            .unwrap()
    }

    fn four_clusters() -> StudyFrame {
        frame(
            &[
                ("t1", true, 1.0, 1.0, &[]),
                ("t2", true, 3.0, 1.0, &[]),
                ("c1", false, 0.0, 1.0, &[]),
                ("c2", false, 2.0, 1.0, &[]),
            ],
            &[],
        )
    }

    #[test]
    fn four_cluster_hand_example() {
        let f = four_clusters();
        let cf = aggregate(&f);
        let fit = fit_wls(&f, &[]).unwrap();
        assert_abs_diff_eq!(fit.beta1, 1.0, epsilon = 1e-12);
        let est = designbased_se(&fit, &cf, R2Weighting::ClusterWeights, 0.05).unwrap();
        // residuals ±1 in each arm, divisor 1: s² = 2, Var = 2/2 + 2/2
        assert_abs_diff_eq!(est.s2_1, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(est.s2_0, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(est.variance, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(est.se, 2.0_f64.sqrt(), epsilon = 1e-12);
        assert_eq!(est.df, 2);
        assert_eq!(est.r2_tx, 0.0);
    }

    #[test]
    fn insufficient_df() {
        let f = frame(
            &[
                ("t1", true, 1.0, 1.0, &[0.1]),
                ("t2", true, 3.0, 1.0, &[0.7]),
                ("c1", false, 0.0, 1.0, &[0.3]),
                ("c2", false, 2.0, 1.0, &[0.2]),
            ],
            &["x"],
        );
        // m¹ − k p* − 1 = 2 − 0.5 − 1 > 0 but m⁰ side equal; both 0.5 > 0, so k = 1 fits
        assert!(fit_wls(&f, &[0]).is_ok());
        let f2 = f.with_covariates(vec!["x2".into()], vec![vec![1.0, 5.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            fit_wls(&f2, &[0, 1]),
            Err(Error::InsufficientDf { .. })
        ));
    }

    #[test]
    fn rank_deficiency_names_column() {
        let rows: Vec<(String, bool, f64, f64, Vec<f64>)> = (0..12)
            .map(|i| {
                let x = (i as f64 * 0.37).sin();
                (format!("c{}", i / 2), (i / 2) % 2 == 0, i as f64, 1.0, vec![x, 2.0 * x])
            })
            .collect();
        let rows_ref: Vec<(&str, bool, f64, f64, &[f64])> = rows
            .iter()
            .map(|(c, t, y, w, x)| (c.as_str(), *t, *y, *w, x.as_slice()))
            .collect();
        let f = frame(&rows_ref, &["a", "b"]);
        match fit_wls(&f, &[0, 1]) {
            Err(Error::RankDeficient(c)) => assert_eq!(c, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicating_individuals_keeps_se() {
        let f = frame(
            &[
                ("t1", true, 1.0, 1.0, &[0.5]),
                ("t1", true, 2.0, 2.0, &[1.5]),
                ("t2", true, 3.5, 1.0, &[-0.2]),
                ("t3", true, 0.2, 1.5, &[0.9]),
                ("c1", false, 0.0, 1.0, &[0.1]),
                ("c2", false, 2.0, 0.5, &[2.0]),
                ("c2", false, 1.0, 1.0, &[-1.0]),
                ("c3", false, -1.0, 2.0, &[0.4]),
            ],
            &["x"],
        );
        let mut doubled: Vec<IndividualRecord> = f.records().collect();
        doubled.extend(f.records());
        let assignment = f
            .cluster_ids()
            .iter()
            .cloned()
            .zip(f.treated().iter().copied())
            .collect();
        let g = StudyFrame::from_records(doubled, &assignment, vec!["x".into()]).unwrap();
        let a = estimate_ate(&f, &aggregate(&f), &[0], R2Weighting::ClusterWeights, 0.05).unwrap();
        let b = estimate_ate(&g, &aggregate(&g), &[0], R2Weighting::ClusterWeights, 0.05).unwrap();
        assert_abs_diff_eq!(a.estimate, b.estimate, epsilon = 1e-10);
        assert_abs_diff_eq!(a.se, b.se, epsilon = 1e-10);
    }
}
