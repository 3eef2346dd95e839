//! Leave-one-cluster-out cross-validation over a fixed λ grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::path::run_path;
use super::{SolverSettings, StandardizedDesign};
use crate::data::standardize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda_selected: f64,
    pub selected_index: usize,
    /// Σ_j w_j (ỹ_j − z̃_j δ̂⁽⁻ʲ⁾)² per grid point.
    pub cv_errors: Vec<f64>,
}

/// Squared prediction errors of held-out cluster `j` along the grid. The
/// training clusters are re-centered and re-scaled on their own, and the
/// held-out row is transformed with the training centers and scales.
fn fold_errors(
    design: &StandardizedDesign,
    grid: &[f64],
    settings: &SolverSettings,
    j: usize,
) -> Result<Vec<f64>> {
    let train_frame = design.frame.without_cluster(j);
    let mut train = standardize(&train_frame, design.options, false)?;
    train.penalty = design.penalty.clone();
    let gram = train.gram();
    let lmax = gram.lambda_max(&train.penalty);
    let (coefs, _) = run_path(&train, &gram, lmax, grid, settings)?;
    let (yt, row) = train.transform_cluster(&design.frame, j);
    let wj = design.frame.weights[j];
    Ok(coefs
        .iter()
        .map(|b| {
            let pred: f64 = row.iter().zip(b).map(|(z, c)| z * c).sum();
            wj * (yt - pred) * (yt - pred)
        })
        .collect())
}

/// Picks the λ minimizing leave-one-cluster-out prediction error; ties go to
/// the larger λ. Fully deterministic.
pub fn loocv_select(
    design: &StandardizedDesign,
    grid: &[f64],
    settings: &SolverSettings,
) -> Result<CvResult> {
    let m = design.m();
    if m < 3 {
        return Err(Error::TooFewClusters(m));
    }
    if grid.is_empty() {
        return Err(Error::InvalidGrid("empty grid".into()));
    }
    let folds: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| fold_errors(design, grid, settings, j))
        .collect::<Result<_>>()?;
    let mut cv_errors = vec![0.0; grid.len()];
    for fold in &folds {
        for (acc, e) in cv_errors.iter_mut().zip(fold) {
            *acc += e;
        }
    }
    let mut selected_index = 0;
    for (i, &e) in cv_errors.iter().enumerate() {
        if e < cv_errors[selected_index] {
            selected_index = i;
        }
    }
    Ok(CvResult {
        lambda_selected: grid[selected_index],
        selected_index,
        cv_errors,
    })
}
