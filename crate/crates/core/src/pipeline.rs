//! The two-stage Lasso-OLS hybrid.
//!
//! Stage 1 runs the weighted lasso on cluster means with leave-one-cluster-out
//! choice of λ. Stage 2 fits WLS on the individual records with the selected
//! covariates (plus any forced ones) and reports the design-based standard
//! error. An optional second lasso pass screens pairwise interactions of the
//! selected main effects.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{aggregate, center_and_standardize, ClusterFrame, StandardizeOptions, StudyFrame};
use crate::error::{Error, Result};
use crate::lasso::{
    fit_path_cv, lambda_grid, lambda_max, selected_covariates, LassoPath, Selection,
    SolverSettings, StandardizedDesign,
};
use crate::wls::{check_df, estimate_ate, AteEstimate, R2Weighting};

/// λ grid and solver settings for stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoConfig {
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub solver: SolverSettings,
    pub standardize: StandardizeOptions,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            n_lambda: 100,
            lambda_min_ratio: 1e-4,
            solver: SolverSettings::default(),
            standardize: StandardizeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Always in the model; unpenalized in stage 1.
    pub forced_covariates: Vec<String>,
    /// Lasso candidates; every non-forced covariate when absent.
    pub candidate_covariates: Option<Vec<String>>,
    /// Comparison model for stage 2, e.g. the pretest alone.
    pub baseline_covariates: Option<Vec<String>>,
    pub interaction_pass: bool,
    /// Penalize the main effects again in the interaction pass.
    pub repenalize_mains: bool,
    pub alpha: f64,
    pub lasso: LassoConfig,
    pub r2_weighting: R2Weighting,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            forced_covariates: Vec::new(),
            candidate_covariates: None,
            baseline_covariates: None,
            interaction_pass: false,
            repenalize_mains: false,
            alpha: 0.05,
            lasso: LassoConfig::default(),
            r2_weighting: R2Weighting::Individual,
        }
    }
}

/// Result of one stage-1 lasso run.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOne {
    pub design: StandardizedDesign,
    pub path: LassoPath,
    pub selection: Selection,
    /// Covariates dropped for having no variation across clusters.
    pub dropped_constant: Vec<usize>,
}

/// Builds the design over `forced ∪ candidates` (study-frame positions),
/// dropping zero-variance covariates with a warning, then fits the path and
/// picks λ by leave-one-cluster-out CV.
pub fn stage_one(
    cf: &ClusterFrame,
    forced: &[usize],
    candidates: &[usize],
    lasso: &LassoConfig,
) -> Result<StageOne> {
    let mut cols: Vec<usize> = forced.iter().chain(candidates).copied().collect();
    cols.sort_unstable();
    cols.dedup();
    let mut dropped = Vec::new();
    let design = loop {
        match center_and_standardize(&cf.select_covariates(&cols), lasso.standardize) {
            Ok(d) => break d,
            Err(Error::ZeroVarianceCovariate { index, name }) => {
                warn!("dropping covariate `{name}`: no variation across clusters");
                dropped.push(index);
                cols.retain(|&c| c != index);
            }
            Err(e) => return Err(e),
        }
    };
    let free: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| forced.contains(c))
        .map(|(pos, _)| pos + 1)
        .collect();
    let design = design.with_unpenalized(&free);
    let grid = lambda_grid(lambda_max(&design), lasso.n_lambda, lasso.lambda_min_ratio);
    let path = fit_path_cv(&design, &grid, &lasso.solver)?;
    let selection = selected_covariates(&path)?;
    Ok(StageOne {
        design,
        path,
        selection,
        dropped_constant: dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub n_clusters: usize,
    pub n_individuals: usize,
    pub lambda_max: f64,
    pub lambda_selected: f64,
    pub n_lambda: usize,
    pub cv_min_error: f64,
    pub max_kkt_violation: f64,
    pub forced_covariates: Vec<String>,
    /// Main effects chosen by stage 1 (excluding forced ones).
    pub selected_covariates: Vec<String>,
    /// Study-frame positions of `selected_covariates`.
    pub selected_indices: Vec<usize>,
    pub treatment_selected: bool,
    pub interaction_candidates: Vec<String>,
    pub selected_interactions: Vec<String>,
    pub dropped_constant: Vec<String>,
    pub dropped_for_df: Vec<String>,
    /// Covariates in the stage-2 model.
    pub stage2_covariates: Vec<String>,
    pub estimate: AteEstimate,
    pub baseline: Option<AteEstimate>,
    /// 1 − se / se_baseline.
    pub se_reduction: Option<f64>,
}

fn resolve(frame: &StudyFrame, names: &[String]) -> Result<Vec<usize>> {
    names.iter().map(|n| frame.covariate_index(n)).collect()
}

/// Interaction screening output.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionPass {
    /// Input frame with the product columns appended.
    pub frame: StudyFrame,
    pub candidates: Vec<usize>,
    pub selected: Vec<usize>,
    /// Main effects still in the model (all of them unless re-penalized).
    pub mains: Vec<usize>,
    pub stage: Option<StageOne>,
}

/// Forms pairwise products of the selected main effects at the individual
/// level and runs a second lasso with the products as candidates.
pub fn interaction_pass(
    frame: &StudyFrame,
    selected_mains: &[usize],
    forced: &[usize],
    config: &PipelineConfig,
) -> Result<InteractionPass> {
    let mut mains = selected_mains.to_vec();
    mains.sort_unstable();
    if mains.len() < 2 {
        return Ok(InteractionPass {
            frame: frame.clone(),
            candidates: Vec::new(),
            selected: Vec::new(),
            mains,
            stage: None,
        });
    }
    let names = frame.covariate_names();
    let mut new_names = Vec::new();
    let mut columns = Vec::new();
    for (a, &qa) in mains.iter().enumerate() {
        for &qb in &mains[a + 1..] {
            new_names.push(format!("{}:{}", names[qa], names[qb]));
            columns.push((0..frame.n()).map(|i| frame.x(i, qa) * frame.x(i, qb)).collect());
        }
    }
    let v = frame.v();
    let candidates: Vec<usize> = (v..v + new_names.len()).collect();
    let augmented = frame.with_covariates(new_names, columns)?;
    let cf = aggregate(&augmented);
    let (free, penalized): (Vec<usize>, Vec<usize>) = if config.repenalize_mains {
        (
            forced.to_vec(),
            mains.iter().chain(&candidates).copied().collect(),
        )
    } else {
        (
            forced.iter().chain(&mains).copied().collect(),
            candidates.clone(),
        )
    };
    let stage = stage_one(&cf, &free, &penalized, &config.lasso)?;
    let chosen = &stage.selection.covariates;
    let selected = candidates.iter().copied().filter(|c| chosen.contains(c)).collect();
    let kept_mains = if config.repenalize_mains {
        mains.iter().copied().filter(|c| chosen.contains(c)).collect()
    } else {
        mains
    };
    Ok(InteractionPass {
        frame: augmented,
        candidates,
        selected,
        mains: kept_mains,
        stage: Some(stage),
    })
}

pub fn run_two_stage(frame: &StudyFrame, config: &PipelineConfig) -> Result<TwoStageReport> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha {} outside (0, 1)", config.alpha)));
    }
    let forced = resolve(frame, &config.forced_covariates)?;
    let candidates = match &config.candidate_covariates {
        Some(names) => resolve(frame, names)?,
        None => (0..frame.v()).filter(|q| !forced.contains(q)).collect(),
    };
    if let Some(q) = candidates.iter().find(|q| forced.contains(q)) {
        return Err(Error::InvalidConfig(format!(
            "covariate `{}` is both forced and a candidate",
            frame.covariate_names()[*q]
        )));
    }
    let cf = aggregate(frame);
    let s1 = stage_one(&cf, &forced, &candidates, &config.lasso)?;
    let forced: Vec<usize> = forced
        .into_iter()
        .filter(|q| !s1.dropped_constant.contains(q))
        .collect();
    let mains: Vec<usize> = s1
        .selection
        .covariates
        .iter()
        .copied()
        .filter(|q| !forced.contains(q))
        .collect();

    // |standardized coefficient| of each selectable covariate, for the df rescue
    let mut strength: Vec<(usize, f64)> = s1
        .selection
        .covariates
        .iter()
        .zip(&s1.selection.coefficients)
        .map(|(&q, &b)| (q, b.abs()))
        .collect();

    let (stage2_frame, model_mains, interaction_candidates, interactions) = if config.interaction_pass {
        let ip = interaction_pass(frame, &mains, &forced, config)?;
        if let Some(st) = &ip.stage {
            for (&q, &b) in st.selection.covariates.iter().zip(&st.selection.coefficients) {
                if ip.candidates.contains(&q) {
                    strength.push((q, b.abs()));
                }
            }
        }
        (ip.frame, ip.mains, ip.candidates, ip.selected)
    } else {
        (frame.clone(), mains.clone(), Vec::new(), Vec::new())
    };
    let names = stage2_frame.covariate_names().to_vec();
    let cf2 = if config.interaction_pass {
        aggregate(&stage2_frame)
    } else {
        cf
    };

    let mut model: Vec<usize> = forced
        .iter()
        .chain(&model_mains)
        .chain(&interactions)
        .copied()
        .collect();
    model.sort_unstable();
    model.dedup();
    let mut dropped_for_df = Vec::new();
    while let Err(e) = check_df(&cf2, model.len()) {
        let weakest = model
            .iter()
            .filter(|q| !forced.contains(q))
            .map(|&q| {
                let s = strength.iter().find(|p| p.0 == q).map_or(0.0, |p| p.1);
                (q, s)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match weakest {
            Some((q, _)) => {
                warn!("dropping `{}` to satisfy degrees-of-freedom limits", names[q]);
                dropped_for_df.push(names[q].clone());
                model.retain(|&c| c != q);
            }
            None => return Err(e),
        }
    }

    let estimate = estimate_ate(&stage2_frame, &cf2, &model, config.r2_weighting, config.alpha)?;
    let baseline = match &config.baseline_covariates {
        Some(b) => {
            let mut idx = resolve(&stage2_frame, b)?;
            idx.sort_unstable();
            Some(estimate_ate(&stage2_frame, &cf2, &idx, config.r2_weighting, config.alpha)?)
        }
        None => None,
    };
    let se_reduction = baseline.as_ref().map(|b| 1.0 - estimate.se / b.se);
    let path = &s1.path;
    let cv = path.cv_errors.as_ref().expect("stage one runs cross-validation");
    let sel = path.selected_index.expect("stage one selects lambda");
    let name_list = |idx: &[usize]| idx.iter().map(|&q| names[q].clone()).collect::<Vec<_>>();
    Ok(TwoStageReport {
        n_clusters: frame.m(),
        n_individuals: frame.n(),
        lambda_max: path.lambda_max,
        lambda_selected: path.lambda_grid[sel],
        n_lambda: path.lambda_grid.len(),
        cv_min_error: cv[sel],
        max_kkt_violation: path.kkt_violations.iter().copied().fold(0.0, f64::max),
        forced_covariates: name_list(&forced),
        selected_covariates: name_list(&mains),
        selected_indices: mains.clone(),
        treatment_selected: s1.selection.treatment_selected,
        interaction_candidates: name_list(&interaction_candidates),
        selected_interactions: name_list(&interactions),
        dropped_constant: name_list(&s1.dropped_constant),
        dropped_for_df,
        stage2_covariates: name_list(&model),
        estimate,
        baseline,
        se_reduction,
    })
}

/// Runs the pipeline and a stage-2 fit with `baseline` alone, reporting the
/// relative SE reduction.
pub fn compare_to_baseline(
    frame: &StudyFrame,
    baseline: &[String],
    config: &PipelineConfig,
) -> Result<TwoStageReport> {
    let cfg = PipelineConfig {
        baseline_covariates: Some(baseline.to_vec()),
        ..config.clone()
    };
    run_two_stage(frame, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IndividualRecord;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::collections::BTreeMap;

    /// Clusters with one strong cluster-level covariate and `noise` others.
    fn planted(seed: u64, m: usize, noise: usize, signal: f64) -> StudyFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = noise + 1;
        let mut records = Vec::new();
        let mut assignment = BTreeMap::new();
        for j in 0..m {
            let id = format!("c{j:03}");
            assignment.insert(id.clone(), j % 2 == 0);
            let xc: Vec<f64> = (0..v).map(|_| rng.sample(StandardNormal)).collect();
            let u: f64 = rng.sample(StandardNormal);
            for _ in 0..10 {
                let e: f64 = rng.sample(StandardNormal);
                let x: Vec<f64> = xc.iter().map(|c| c + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
                records.push(IndividualRecord {
                    cluster_id: id.clone(),
                    y: signal * xc[0] + 0.3 * u + e,
                    x,
                    w: 1.0,
                });
            }
        }
        let names = (0..v).map(|q| format!("x{q}")).collect();
        StudyFrame::from_records(records, &assignment, names).unwrap()
    }

    #[test]
    fn empty_selection_is_difference_in_means() {
        let rows = [("a", true, 3.0), ("b", true, 5.0), ("c", false, 1.0), ("d", false, 2.0), ("e", true, 4.5), ("f", false, 0.5)];
        let assignment: BTreeMap<String, bool> = rows.iter().map(|r| (r.0.to_string(), r.1)).collect();
        let records = rows
            .iter()
            .map(|r| IndividualRecord { cluster_id: r.0.into(), y: r.2, x: vec![], w: 1.0 })
            .collect();
        let f = StudyFrame::from_records(records, &assignment, vec![]).unwrap();
        let rep = run_two_stage(&f, &PipelineConfig::default()).unwrap();
        assert!(rep.stage2_covariates.is_empty());
        assert_abs_diff_eq!(rep.estimate.estimate, 12.5 / 3.0 - 3.5 / 3.0, epsilon = 1e-12);
        assert_eq!(rep.estimate.df, 4);
        assert_eq!(rep.estimate.r2_tx, 0.0);
    }

    #[test]
    fn forced_covariates_always_in_model() {
        let f = planted(3, 20, 4, 2.0);
        let cfg = PipelineConfig {
            forced_covariates: vec!["x4".into()],
            ..Default::default()
        };
        let rep = run_two_stage(&f, &cfg).unwrap();
        assert!(rep.stage2_covariates.contains(&"x4".to_string()));
        assert!(!rep.selected_covariates.contains(&"x4".to_string()));
    }

    #[test]
    fn forced_and_candidate_overlap_rejected() {
        let f = planted(4, 12, 2, 1.0);
        let cfg = PipelineConfig {
            forced_covariates: vec!["x1".into()],
            candidate_covariates: Some(vec!["x1".into(), "x2".into()]),
            ..Default::default()
        };
        assert!(matches!(run_two_stage(&f, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn planted_strong_covariate_retained() {
        let mut hits = 0;
        for seed in 0..100 {
            let f = planted(1000 + seed, 20, 4, 3.0);
            let s1 = stage_one(&aggregate(&f), &[], &[0, 1, 2, 3, 4], &LassoConfig::default()).unwrap();
            if s1.selection.covariates.contains(&0) {
                hits += 1;
            }
        }
        assert!(hits >= 95, "strong covariate kept in {hits}/100");
    }

    #[test]
    fn constant_covariate_dropped_with_warning() {
        let f = planted(5, 12, 1, 1.0);
        let n = f.n();
        let f = f.with_covariates(vec!["const".into()], vec![vec![2.0; n]]).unwrap();
        let rep = run_two_stage(&f, &PipelineConfig::default()).unwrap();
        assert_eq!(rep.dropped_constant, vec!["const".to_string()]);
    }

    #[test]
    fn single_main_effect_has_no_interactions() {
        let f = planted(6, 16, 2, 2.0);
        let cfg = PipelineConfig::default();
        let ip = interaction_pass(&f, &[0], &[], &cfg).unwrap();
        assert!(ip.candidates.is_empty() && ip.selected.is_empty());
        assert_eq!(ip.frame, f);
        let ip = interaction_pass(&f, &[0, 1, 2], &[], &cfg).unwrap();
        assert_eq!(ip.candidates.len(), 3);
        assert_eq!(ip.frame.covariate_names()[3], "x0:x1");
    }

    #[test]
    fn baseline_equal_to_model_gives_zero_reduction() {
        let f = planted(7, 24, 3, 2.0);
        let rep = run_two_stage(&f, &PipelineConfig::default()).unwrap();
        let again = compare_to_baseline(&f, &rep.stage2_covariates, &PipelineConfig::default()).unwrap();
        assert_eq!(again.se_reduction, Some(0.0));
    }

    #[test]
    fn repeat_runs_are_identical() {
        let f = planted(8, 18, 5, 1.5);
        let a = serde_json::to_string(&run_two_stage(&f, &PipelineConfig::default()).unwrap()).unwrap();
        let b = serde_json::to_string(&run_two_stage(&f, &PipelineConfig::default()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn df_rescue_drops_weakest() {
        // 6 clusters (3 per arm): at most k with 3 − 0.5k − 1 > 0, i.e. k ≤ 3
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 6;
        let v = 5;
        let mut records = Vec::new();
        let mut assignment = BTreeMap::new();
        for j in 0..m {
            let id = format!("c{j}");
            assignment.insert(id.clone(), j < 3);
            for _ in 0..4 {
                let x: Vec<f64> = (0..v).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = x.iter().enumerate().map(|(q, a)| (q + 1) as f64 * a).sum::<f64>();
                records.push(IndividualRecord { cluster_id: id.clone(), y, x, w: 1.0 });
            }
        }
        let f = StudyFrame::from_records(records, &assignment, (0..v).map(|q| format!("x{q}")).collect()).unwrap();
        let cfg = PipelineConfig {
            lasso: LassoConfig { n_lambda: 20, lambda_min_ratio: 1e-6, ..Default::default() },
            ..Default::default()
        };
        let rep = run_two_stage(&f, &cfg).unwrap();
        assert!(rep.stage2_covariates.len() <= 3);
        assert_eq!(
            rep.dropped_for_df.len() + rep.stage2_covariates.len(),
            rep.selected_covariates.len()
        );
    }
}
