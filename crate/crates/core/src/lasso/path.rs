use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{kkt_check, loocv_select, solve, Gram, SolverSettings, StandardizedDesign, KKT_REL_TOL};
use crate::error::{Error, Result};

/// Coefficients over a decreasing λ grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub lambda_max: f64,
    pub lambda_grid: Vec<f64>,
    pub column_names: Vec<String>,
    /// Study-frame position of each covariate column (design columns 1..).
    pub covariate_index: Vec<usize>,
    pub penalty: Vec<f64>,
    pub coefs: Vec<Vec<f64>>,
    pub nonzero_counts: Vec<usize>,
    pub kkt_violations: Vec<f64>,
    pub kkt_tol: f64,
    pub cv_errors: Option<Vec<f64>>,
    pub lambda_selected: Option<f64>,
    pub selected_index: Option<usize>,
}

/// `n` log-spaced values from `lambda_max` down to `lambda_max * min_ratio`.
/// The first entry is `lambda_max` exactly.
pub fn lambda_grid(lambda_max: f64, n: usize, min_ratio: f64) -> Vec<f64> {
    if lambda_max <= 0.0 || n <= 1 {
        return vec![lambda_max.max(0.0)];
    }
    let step = min_ratio.ln() / (n - 1) as f64;
    (0..n)
        .map(|i| {
            if i == 0 {
                lambda_max
            } else {
                lambda_max * (step * i as f64).exp()
            }
        })
        .collect()
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidGrid("empty grid".into()));
    }
    if grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::InvalidGrid("values must be finite and >= 0".into()));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidGrid("grid must be strictly decreasing".into()));
    }
    Ok(())
}

/// Warm-started fits along `grid`; returns coefficients and KKT violations.
pub(crate) fn run_path(
    design: &StandardizedDesign,
    gram: &Gram,
    lmax: f64,
    grid: &[f64],
    settings: &SolverSettings,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let tol = KKT_REL_TOL * lmax;
    let mut coefs: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    let mut violations = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let warm = coefs.last().map(|b| b.as_slice());
        let b = solve(design, gram, lmax, lambda, warm, settings, tol)?;
        let report = kkt_check(design, &b, lambda, tol);
        if !report.pass {
            return Err(Error::KktViolation {
                lambda,
                violation: report.max_violation,
            });
        }
        violations.push(report.max_violation);
        coefs.push(b);
    }
    Ok((coefs, violations))
}

/// Fits the whole path. The grid must be strictly decreasing with
/// `grid[0] >= lambda_max`, so the first solution is all-zero.
pub fn fit_path(
    design: &StandardizedDesign,
    grid: &[f64],
    settings: &SolverSettings,
) -> Result<LassoPath> {
    validate_grid(grid)?;
    let gram = design.gram();
    let lmax = gram.lambda_max(&design.penalty);
    if grid[0] < lmax {
        return Err(Error::InvalidGrid(format!(
            "grid starts at {} below lambda_max {}",
            grid[0], lmax
        )));
    }
    let (coefs, kkt_violations) = run_path(design, &gram, lmax, grid, settings)?;
    Ok(LassoPath {
        lambda_max: lmax,
        lambda_grid: grid.to_vec(),
        column_names: design.column_names.clone(),
        covariate_index: design.frame.covariate_index.clone(),
        penalty: design.penalty.clone(),
        nonzero_counts: coefs
            .iter()
            .map(|b| b.iter().filter(|&&x| x != 0.0).count())
            .collect(),
        coefs,
        kkt_violations,
        kkt_tol: KKT_REL_TOL * lmax,
        cv_errors: None,
        lambda_selected: None,
        selected_index: None,
    })
}

/// Path plus leave-one-cluster-out selection of λ.
pub fn fit_path_cv(
    design: &StandardizedDesign,
    grid: &[f64],
    settings: &SolverSettings,
) -> Result<LassoPath> {
    let mut path = fit_path(design, grid, settings)?;
    let cv = loocv_select(design, grid, settings)?;
    path.cv_errors = Some(cv.cv_errors);
    path.lambda_selected = Some(cv.lambda_selected);
    path.selected_index = Some(cv.selected_index);
    Ok(path)
}

/// Covariates with nonzero coefficients at the selected λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Study-frame covariate positions, ascending.
    pub covariates: Vec<usize>,
    pub names: Vec<String>,
    /// Standardized-scale coefficients, aligned with `covariates`.
    pub coefficients: Vec<f64>,
    pub treatment_selected: bool,
    pub treatment_coefficient: f64,
}

/// The treatment coefficient is reported separately and never counted as a
/// covariate.
pub fn selected_covariates(path: &LassoPath) -> Result<Selection> {
    let idx = path
        .selected_index
        .ok_or_else(|| Error::InvalidConfig("no lambda selected on this path".into()))?;
    let b = &path.coefs[idx];
    let mut picked: Vec<(usize, String, f64)> = (1..b.len())
        .filter(|&c| b[c] != 0.0)
        .map(|c| (path.covariate_index[c - 1], path.column_names[c].clone(), b[c]))
        .collect();
    picked.sort_by_key(|p| p.0);
    Ok(Selection {
        covariates: picked.iter().map(|p| p.0).collect(),
        names: picked.iter().map(|p| p.1.clone()).collect(),
        coefficients: picked.iter().map(|p| p.2).collect(),
        treatment_selected: b[0] != 0.0,
        treatment_coefficient: b[0],
    })
}

/// Path coefficients read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTable {
    pub column_names: Vec<String>,
    pub lambdas: Vec<f64>,
    pub coefs: Vec<Vec<f64>>,
}

/// One row per λ: `lambda,nonzero,cv_error,<coefficient columns>`.
pub fn write_path_csv<W: Write>(path: &LassoPath, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["lambda".to_string(), "nonzero".into(), "cv_error".into()];
    header.extend(path.column_names.iter().cloned());
    wtr.write_record(&header).map_err(csv_err)?;
    for (i, b) in path.coefs.iter().enumerate() {
        let mut row = vec![
            path.lambda_grid[i].to_string(),
            path.nonzero_counts[i].to_string(),
            path.cv_errors
                .as_ref()
                .map(|e| e[i].to_string())
                .unwrap_or_default(),
        ];
        row.extend(b.iter().map(|x| x.to_string()));
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_path_csv<R: Read>(reader: R) -> Result<PathTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.len() < 4 || &header[0] != "lambda" {
        return Err(Error::Csv {
            line: 1,
            message: "expected a lambda path header".into(),
        });
    }
    let column_names = header.iter().skip(3).map(str::to_string).collect();
    let mut lambdas = Vec::new();
    let mut coefs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Csv {
                line,
                message: e.to_string(),
            })
        };
        lambdas.push(parse(&rec[0])?);
        coefs.push(rec.iter().skip(3).map(parse).collect::<Result<Vec<_>>>()?);
    }
    Ok(PathTable {
        column_names,
        lambdas,
        coefs,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv {
        line: e.position().map(|p| p.line()).unwrap_or(0),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{center_and_standardize, StandardizeOptions};
    use crate::lasso::{fit_lasso, lambda_max, tests::random_frame};
    use approx::assert_abs_diff_eq;

    fn design(seed: u64) -> StandardizedDesign {
        center_and_standardize(&random_frame(seed, 18, 4), StandardizeOptions::default()).unwrap()
    }

    #[test]
    fn grid_shape() {
        let g = lambda_grid(2.0, 100, 1e-4);
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 2.0);
        assert_abs_diff_eq!(g[99], 2e-4, epsilon = 1e-15);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn single_point_grid() {
        let d = design(11);
        let lm = lambda_max(&d);
        let p = fit_path(&d, &[lm], &SolverSettings::default()).unwrap();
        assert_eq!(p.coefs.len(), 1);
        assert!(p.coefs[0].iter().all(|&b| b == 0.0));
        assert_eq!(p.nonzero_counts, vec![0]);
    }

    #[test]
    fn grid_below_lambda_max_rejected() {
        let d = design(12);
        let lm = lambda_max(&d);
        assert!(fit_path(&d, &[0.5 * lm, 0.1 * lm], &SolverSettings::default()).is_err());
        assert!(fit_path(&d, &[lm, lm], &SolverSettings::default()).is_err());
    }

    #[test]
    fn warm_starts_match_cold_fits() {
        let d = design(13);
        let grid = lambda_grid(lambda_max(&d), 30, 1e-3);
        let s = SolverSettings::default();
        let path = fit_path(&d, &grid, &s).unwrap();
        assert_eq!(path.nonzero_counts[0], 0);
        assert!(*path.nonzero_counts.last().unwrap() >= path.nonzero_counts[0]);
        for (i, &l) in grid.iter().enumerate() {
            let cold = fit_lasso(&d, l, None, &s).unwrap();
            for q in 0..d.p() {
                assert_abs_diff_eq!(cold[q], path.coefs[i][q], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn selection_separates_treatment() {
        let d = design(14);
        let mut path = fit_path(&d, &[lambda_max(&d)], &SolverSettings::default()).unwrap();
        path.coefs[0] = vec![0.4, 0.0, 0.0, 0.0, 0.0];
        path.selected_index = Some(0);
        let sel = selected_covariates(&path).unwrap();
        assert!(sel.covariates.is_empty());
        assert!(sel.treatment_selected);
        path.coefs[0] = vec![0.0; 5];
        let sel = selected_covariates(&path).unwrap();
        assert!(sel.covariates.is_empty() && !sel.treatment_selected);
    }

    #[test]
    fn path_csv_round_trip_passes_kkt() {
        let d = design(15);
        let lm = lambda_max(&d);
        let path = fit_path_cv(&d, &lambda_grid(lm, 25, 1e-3), &SolverSettings::default()).unwrap();
        let mut buf = Vec::new();
        write_path_csv(&path, &mut buf).unwrap();
        let table = read_path_csv(buf.as_slice()).unwrap();
        assert_eq!(table.column_names, d.column_names);
        assert_eq!(table.lambdas, path.lambda_grid);
        for (l, b) in table.lambdas.iter().zip(&table.coefs) {
            assert!(crate::lasso::kkt_check(&d, b, *l, KKT_REL_TOL * lm).pass);
        }
    }
}
