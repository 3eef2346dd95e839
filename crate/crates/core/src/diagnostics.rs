//! Selection diagnostics: treatment-covariate R², the irrepresentable
//! condition on a standardized design, and a selection-consistency probe over
//! growing cluster counts.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{aggregate, ClusterFrame, StudyFrame};
use crate::linalg::solve_spd;
use crate::error::{Error, Result};
use crate::lasso::StandardizedDesign;
use crate::pipeline::stage_one;
use crate::report::config_hash;
use crate::sim::{draw_assignment, generate_population, observed_frame, population_seed, rep_rng, SimConfig};
use crate::wls::R2Weighting;

/// R² of the w_ij-weighted regression of T_j − p* on the individual covariates
/// centered at their weighted grand means. NaN when the covariate block is
/// singular.
pub(crate) fn individual_r2(frame: &StudyFrame, cf: &ClusterFrame, subset: &[usize]) -> f64 {
    let k = subset.len();
    if k == 0 {
        return 0.0;
    }
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    let mut xt = vec![0.0; k];
    for i in 0..frame.n() {
        let j = frame.cluster_of()[i];
        let t = if cf.treated[j] { 1.0 } else { 0.0 } - cf.p_star;
        let w = frame.w()[i];
        for (c, &q) in subset.iter().enumerate() {
            xt[c] = frame.x(i, q) - cf.xbar_grand[q];
        }
        for g in 0..k {
            b[g] += w * xt[g] * t;
            for h in 0..=g {
                a[(g, h)] += w * xt[g] * xt[h];
            }
        }
    }
    for g in 0..k {
        for h in 0..g {
            a[(h, g)] = a[(g, h)];
        }
    }
    let sst: f64 = (0..cf.m)
        .map(|j| cf.weights[j] * (if cf.treated[j] { 1.0 } else { 0.0 } - cf.p_star).powi(2))
        .sum();
    match solve_spd(&a, &b) {
        Some(beta) => beta.dot(&b) / sst,
        None => f64::NAN,
    }
}

/// Individual-level version of [`r2_treatment_on_covariates`].
pub fn r2_treatment_on_individual_covariates(
    frame: &StudyFrame,
    cf: &ClusterFrame,
    subset: &[usize],
) -> Result<f64> {
    let r2 = individual_r2(frame, cf, subset);
    if !(r2 < 1.0 - 1e-10) {
        return Err(Error::DegenerateRSquared(r2));
    }
    Ok(r2.max(0.0))
}

/// R² from regressing T_j − p* on the chosen covariates' cluster means
/// (study-frame positions). Returns 0 for an empty subset.
///
/// [`R2Weighting::Individual`] needs the individual records; use
/// [`r2_treatment_on_individual_covariates`].
pub fn r2_treatment_on_covariates(
    cf: &ClusterFrame,
    subset: &[usize],
    weighting: R2Weighting,
) -> Result<f64> {
    if subset.is_empty() {
        return Ok(0.0);
    }
    let cols: Vec<usize> = subset
        .iter()
        .map(|q| {
            cf.covariate_index
                .iter()
                .position(|c| c == q)
                .ok_or_else(|| Error::UnknownCovariate(format!("#{q}")))
        })
        .collect::<Result<_>>()?;
    let m = cf.m;
    let t: Vec<f64> = cf
        .treated
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 } - cf.p_star)
        .collect();
    let (w, intercept) = match weighting {
        R2Weighting::ClusterWeights => (cf.weights.clone(), false),
        R2Weighting::None => (vec![1.0; m], true),
        R2Weighting::Individual => {
            return Err(Error::InvalidConfig(
                "individual-level R² needs the study frame".into(),
            ))
        }
    };
    let off = usize::from(intercept);
    let mut x = DMatrix::zeros(m, cols.len() + off);
    let mut y = DVector::zeros(m);
    for j in 0..m {
        let sw = w[j].sqrt();
        if intercept {
            x[(j, 0)] = sw;
        }
        for (c, &q) in cols.iter().enumerate() {
            x[(j, c + off)] = sw * (cf.xbar[j * cf.v() + q] - cf.xbar_grand[q]);
        }
        y[j] = sw * t[j];
    }
    let svd = x.clone().svd(true, true);
    let beta = svd
        .solve(&y, 1e-12 * svd.singular_values.max())
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    let resid = &y - &x * beta;
    let ssr = resid.norm_squared();
    let sst = if intercept {
        let tm = t.iter().sum::<f64>() / m as f64;
        t.iter().map(|v| (v - tm).powi(2)).sum::<f64>()
    } else {
        // T̃ is centered at the w_j-weighted mean, so Σ w T̃² is the total
        y.norm_squared()
    };
    let r2 = 1.0 - ssr / sst;
    if !(r2 < 1.0 - 1e-10) {
        return Err(Error::DegenerateRSquared(r2));
    }
    Ok(r2.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrrepresentabilityReport {
    /// Design columns in the support (0 is treatment).
    pub support: Vec<usize>,
    pub non_support: Vec<usize>,
    pub signs: Vec<f64>,
    /// |Q_NI Q_II⁻¹ s| per non-support column.
    pub projection: Vec<f64>,
    /// 1 − projection per non-support column.
    pub eta_margin: Vec<f64>,
    pub min_margin: f64,
    pub holds: bool,
}

fn check_standardized(design: &StandardizedDesign) -> Result<()> {
    let m = design.m();
    let w: Vec<f64> = if design.options.weighted {
        design.row_weights.clone()
    } else {
        vec![1.0; m]
    };
    for c in 1..design.p() {
        let mean: f64 = (0..m).map(|j| design.row_weights[j] * design.z[(j, c)]).sum::<f64>() / m as f64;
        let var: f64 = (0..m).map(|j| w[j] * design.z[(j, c)].powi(2)).sum::<f64>() / (m as f64 - 1.0);
        if mean.abs() > 1e-8 || (var - 1.0).abs() > 1e-8 {
            return Err(Error::NotStandardized(design.column_names[c].clone()));
        }
    }
    Ok(())
}

/// Checks ‖Q_NI Q_II⁻¹ sign(δ_I)‖_∞ < 1 with Q = (1/m) Σ (w_j/w̄) z_j z_j'.
/// `support` lists design columns, `signs` their coefficient signs.
pub fn irrepresentable_check(
    design: &StandardizedDesign,
    support: &[usize],
    signs: &[f64],
) -> Result<IrrepresentabilityReport> {
    if support.len() != signs.len() {
        return Err(Error::InvalidConfig("support and signs differ in length".into()));
    }
    if let Some(&c) = support.iter().find(|&&c| c >= design.p()) {
        return Err(Error::InvalidConfig(format!("support column {c} out of range")));
    }
    check_standardized(design)?;
    let m = design.m() as f64;
    let q = design.gram().g / m;
    let non_support: Vec<usize> = (0..design.p()).filter(|c| !support.contains(c)).collect();
    let s = support.len();
    let q_ii = DMatrix::from_fn(s, s, |a, b| q[(support[a], support[b])]);
    let sv = DVector::from_column_slice(signs);
    let solved = if s == 0 {
        DVector::zeros(0)
    } else {
        q_ii.cholesky().ok_or(Error::SingularSupportBlock)?.solve(&sv)
    };
    let projection: Vec<f64> = non_support
        .iter()
        .map(|&r| (0..s).map(|a| q[(r, support[a])] * solved[a]).sum::<f64>().abs())
        .collect();
    let eta_margin: Vec<f64> = projection.iter().map(|p| 1.0 - p).collect();
    let min_margin = eta_margin.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(IrrepresentabilityReport {
        support: support.to_vec(),
        non_support,
        signs: signs.to_vec(),
        projection,
        holds: min_margin > 0.0,
        eta_margin,
        min_margin,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub m: usize,
    pub completed: usize,
    pub failed: usize,
    /// Share of replications selecting exactly the true covariates.
    pub exact_rate: f64,
    /// Share selecting a superset of the true covariates.
    pub contains_rate: f64,
    pub avg_true_selected: f64,
    pub avg_false_selected: f64,
    /// Irrepresentable margin on the first replication's design.
    pub min_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<ProbeRow>,
    /// Exact-support rate never decreases as m grows.
    pub exact_monotone: bool,
}

struct ProbeRep {
    true_selected: usize,
    false_selected: usize,
    margin: Option<f64>,
}

/// Runs stage 1 only for each cluster count in `ms` and tracks how often the
/// lasso recovers the true covariates.
pub fn selection_consistency_probe(cfg: &SimConfig, ms: &[usize]) -> Result<ProbeReport> {
    let mut rows = Vec::with_capacity(ms.len());
    for &m in ms {
        let c = SimConfig { m, ..cfg.clone() };
        c.validate()?;
        let seed = population_seed(c.seed ^ (m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), 0);
        let pop = generate_population(&c, seed)?;
        let truth: Vec<usize> = pop.true_support.clone();
        let candidates: Vec<usize> = (0..c.v).collect();
        let outcomes: Vec<Result<ProbeRep>> = (0..c.n_reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = rep_rng(seed, r);
                let treated = draw_assignment(c.m, c.treated_count(), &mut rng);
                let frame = observed_frame(&pop, &treated)?;
                let cf = aggregate(&frame);
                let s1 = stage_one(&cf, &[], &candidates, &c.lasso)?;
                let chosen = &s1.selection.covariates;
                let true_selected = chosen.iter().filter(|q| truth.contains(q)).count();
                let margin = if r == 0 {
                    let support: Vec<usize> = truth.iter().map(|q| q + 1).collect();
                    let signs: Vec<f64> = pop.gamma.iter().map(|g| g.signum()).collect();
                    irrepresentable_check(&s1.design, &support, &signs)
                        .ok()
                        .map(|rep| rep.min_margin)
                } else {
                    None
                };
                Ok(ProbeRep {
                    true_selected,
                    false_selected: chosen.len() - true_selected,
                    margin,
                })
            })
            .collect();
        let mut done = Vec::new();
        let mut failed = 0;
        let mut margin = None;
        for o in outcomes {
            match o {
                Ok(p) => {
                    margin = margin.or(p.margin);
                    done.push(p);
                }
                Err(e) if e.is_numerical() => failed += 1,
                Err(e) => return Err(e),
            }
        }
        if done.is_empty() {
            return Err(Error::NoReplications);
        }
        let k = truth.len();
        let n = done.len() as f64;
        rows.push(ProbeRow {
            m,
            completed: done.len(),
            failed,
            exact_rate: done.iter().filter(|p| p.true_selected == k && p.false_selected == 0).count() as f64 / n,
            contains_rate: done.iter().filter(|p| p.true_selected == k).count() as f64 / n,
            avg_true_selected: done.iter().map(|p| p.true_selected as f64).sum::<f64>() / n,
            avg_false_selected: done.iter().map(|p| p.false_selected as f64).sum::<f64>() / n,
            min_margin: margin,
        });
    }
    let exact_monotone = rows.windows(2).all(|w| w[1].exact_rate >= w[0].exact_rate);
    Ok(ProbeReport {
        config_hash: config_hash(&(cfg, ms)),
        seed: cfg.seed,
        rows,
        exact_monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{center_and_standardize, StandardizeOptions};
    use crate::lasso::tests::random_frame;
    use approx::assert_abs_diff_eq;

    #[test]
    fn empty_subset_r2_is_zero() {
        let cf = random_frame(1, 10, 2);
        assert_eq!(r2_treatment_on_covariates(&cf, &[], R2Weighting::ClusterWeights).unwrap(), 0.0);
    }

    #[test]
    fn r2_matches_correlation_for_one_covariate() {
        let cf = random_frame(2, 14, 1);
        let r2 = r2_treatment_on_covariates(&cf, &[0], R2Weighting::ClusterWeights).unwrap();
        // weighted squared correlation of two centered vectors
        let t: Vec<f64> = cf.treated.iter().map(|&b| f64::from(u8::from(b)) - cf.p_star).collect();
        let x = cf.centered_covariate(0);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for j in 0..cf.m {
            sxy += cf.weights[j] * t[j] * x[j];
            sxx += cf.weights[j] * x[j] * x[j];
            syy += cf.weights[j] * t[j] * t[j];
        }
        assert_abs_diff_eq!(r2, sxy * sxy / (sxx * syy), epsilon = 1e-12);
    }

    #[test]
    fn individual_r2_equals_cluster_r2_for_cluster_covariates() {
        use crate::data::IndividualRecord;
        use std::collections::BTreeMap;
        let mut records = Vec::new();
        let mut assignment = BTreeMap::new();
        for j in 0..9 {
            let id = format!("c{j}");
            assignment.insert(id.clone(), j % 3 != 0);
            let xc = [(j as f64 * 0.9).sin(), (j as f64 * 0.4).cos()];
            for i in 0..(2 + j % 4) {
                records.push(IndividualRecord { cluster_id: id.clone(), y: i as f64, x: xc.to_vec(), w: 1.0 + 0.25 * i as f64 });
            }
        }
        let f = StudyFrame::from_records(records, &assignment, vec!["a".into(), "b".into()]).unwrap();
        let cf = aggregate(&f);
        let ind = r2_treatment_on_individual_covariates(&f, &cf, &[0, 1]).unwrap();
        let clu = r2_treatment_on_covariates(&cf, &[0, 1], R2Weighting::ClusterWeights).unwrap();
        assert!(ind > 0.0);
        assert_abs_diff_eq!(ind, clu, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_design_has_unit_margin() {
        let cf = random_frame(3, 20, 3);
        let d = center_and_standardize(&cf, StandardizeOptions::default()).unwrap();
        let rep = irrepresentable_check(&d, &[], &[]).unwrap();
        assert_eq!(rep.min_margin, 1.0);
        assert!(rep.holds);
    }

    #[test]
    fn unstandardized_design_rejected() {
        let cf = random_frame(4, 12, 2);
        let mut d = center_and_standardize(&cf, StandardizeOptions::default()).unwrap();
        for j in 0..d.m() {
            d.z[(j, 1)] *= 3.0;
        }
        assert!(matches!(
            irrepresentable_check(&d, &[1], &[1.0]),
            Err(Error::NotStandardized(_))
        ));
    }

    #[test]
    fn collinear_support_is_singular() {
        let cf = random_frame(5, 12, 2);
        let mut d = center_and_standardize(&cf, StandardizeOptions::default()).unwrap();
        for j in 0..d.m() {
            d.z[(j, 2)] = d.z[(j, 1)];
        }
        assert!(matches!(
            irrepresentable_check(&d, &[1, 2], &[1.0, 1.0]),
            Err(Error::SingularSupportBlock)
        ));
    }

    #[test]
    fn duplicated_covariate_has_zero_margin() {
        let cf = random_frame(6, 16, 2);
        let mut d = center_and_standardize(&cf, StandardizeOptions::default()).unwrap();
        for j in 0..d.m() {
            d.z[(j, 2)] = d.z[(j, 1)];
        }
        let rep = irrepresentable_check(&d, &[1], &[1.0]).unwrap();
        let pos = rep.non_support.iter().position(|&c| c == 2).unwrap();
        assert_abs_diff_eq!(rep.eta_margin[pos], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sum_of_support_columns_violates() {
        // z3 = (z1 + z2)/sd projects to 2/sd > 1 with signs (+, +)
        let cf = random_frame(7, 30, 3);
        let mut d = center_and_standardize(&cf, StandardizeOptions::default()).unwrap();
        let m = d.m();
        let s: Vec<f64> = (0..m).map(|j| d.z[(j, 1)] + d.z[(j, 2)]).collect();
        let sd = ((0..m).map(|j| d.row_weights[j] * s[j] * s[j]).sum::<f64>() / (m as f64 - 1.0)).sqrt();
        for j in 0..m {
            d.z[(j, 3)] = s[j] / sd;
        }
        let rep = irrepresentable_check(&d, &[1, 2], &[1.0, 1.0]).unwrap();
        let pos = rep.non_support.iter().position(|&c| c == 3).unwrap();
        assert_abs_diff_eq!(rep.projection[pos], 2.0 / sd, epsilon = 1e-10);
        assert!(rep.eta_margin[pos] < 0.0);
        assert!(!rep.holds);
    }
}
