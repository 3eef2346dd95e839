//! Stage-1 covariate selection: the weighted cluster-level lasso
//!
//! ```text
//! min_δ  Σ_j (w_j / w̄) (ỹ_j − z̃_j δ)²  +  λ Σ_q π_q |δ_q|
//! ```
//!
//! where z̃_j = (T_j − p*, standardized x̃_j) and δ = (β₁, γ). The treatment
//! coefficient is penalized like any covariate (π_0 = 1); forced covariates
//! carry π_q = 0.
//!
//! Fits use cyclic coordinate descent on the weighted Gram matrix. Every fit
//! can be certified independently of the solver with [`kkt_check`].

mod cv;
mod path;

pub use cv::{loocv_select, CvResult};
pub use path::{
    fit_path, fit_path_cv, lambda_grid, read_path_csv, selected_covariates, write_path_csv,
    LassoPath, PathTable, Selection,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ClusterFrame, StandardizeOptions};
use crate::error::{Error, Result};

/// KKT tolerance as a fraction of λ_max.
pub const KKT_REL_TOL: f64 = 1e-6;

/// Centered and scaled cluster-level design.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedDesign {
    /// m × (v + 1); column 0 is T_j − p*, the rest standardized covariates.
    pub z: DMatrix<f64>,
    pub ytilde: Vec<f64>,
    /// w_j / w̄.
    pub row_weights: Vec<f64>,
    pub scale_factors: Vec<f64>,
    pub y_scale: f64,
    pub column_names: Vec<String>,
    /// Penalty factor per column: 1 penalized, 0 free.
    pub penalty: Vec<f64>,
    /// The cluster frame the design was built from.
    pub frame: ClusterFrame,
    pub options: StandardizeOptions,
}

impl StandardizedDesign {
    pub fn m(&self) -> usize {
        self.z.nrows()
    }

    /// Number of coefficients, v + 1.
    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    /// Marks design columns as unpenalized.
    pub fn with_unpenalized(mut self, cols: &[usize]) -> Self {
        for &c in cols {
            self.penalty[c] = 0.0;
        }
        self
    }

    /// Position in the originating study frame of design column `col` (≥ 1).
    pub fn covariate_index(&self, col: usize) -> usize {
        self.frame.covariate_index[col - 1]
    }

    /// Transforms cluster `j` of `cf` (same covariate layout as this design)
    /// with this design's centers and scales: returns (ỹ_j, z̃_j).
    pub fn transform_cluster(&self, cf: &ClusterFrame, j: usize) -> (f64, Vec<f64>) {
        let own = &self.frame;
        let yt = (cf.ybar[j] - own.ybar_grand) / self.y_scale;
        let mut row = Vec::with_capacity(self.p());
        row.push(if cf.treated[j] { 1.0 } else { 0.0 } - own.p_star);
        for (q, x) in cf.xbar_row(j).iter().enumerate() {
            row.push((x - own.xbar_grand[q]) / self.scale_factors[q]);
        }
        (yt, row)
    }

    pub fn residuals(&self, coefs: &[f64]) -> Vec<f64> {
        (0..self.m())
            .map(|j| {
                let fit: f64 = (0..self.p()).map(|q| self.z[(j, q)] * coefs[q]).sum();
                self.ytilde[j] - fit
            })
            .collect()
    }

    /// The penalized objective at `coefs`.
    pub fn objective(&self, coefs: &[f64], lambda: f64) -> f64 {
        let sse: f64 = self
            .residuals(coefs)
            .iter()
            .zip(&self.row_weights)
            .map(|(r, a)| a * r * r)
            .sum();
        sse + lambda * l1(coefs, &self.penalty)
    }

    pub fn gram(&self) -> Gram {
        let m = self.m();
        let p = self.p();
        let mut za = self.z.clone();
        for j in 0..m {
            let a = self.row_weights[j];
            for q in 0..p {
                za[(j, q)] *= a;
            }
        }
        let g = self.z.transpose() * &za;
        let c = (0..p)
            .map(|q| (0..m).map(|j| za[(j, q)] * self.ytilde[j]).sum())
            .collect();
        let yy = (0..m)
            .map(|j| self.row_weights[j] * self.ytilde[j] * self.ytilde[j])
            .sum();
        Gram { g, c, yy }
    }
}

fn l1(coefs: &[f64], penalty: &[f64]) -> f64 {
    coefs.iter().zip(penalty).map(|(b, f)| f * b.abs()).sum()
}

/// Weighted cross-products Z'AZ, Z'Aỹ and ỹ'Aỹ.
#[derive(Debug, Clone)]
pub struct Gram {
    pub g: DMatrix<f64>,
    pub c: Vec<f64>,
    pub yy: f64,
}

impl Gram {
    fn objective(&self, beta: &[f64], lambda: f64, penalty: &[f64]) -> f64 {
        let p = beta.len();
        let mut quad = 0.0;
        for q in 0..p {
            let mut row = 0.0;
            for r in 0..p {
                row += self.g[(q, r)] * beta[r];
            }
            quad += beta[q] * row;
        }
        let lin: f64 = self.c.iter().zip(beta).map(|(c, b)| c * b).sum();
        self.yy - 2.0 * lin + quad + lambda * l1(beta, penalty)
    }

    /// Solution with all penalized coefficients at zero: free coefficients
    /// take their weighted least-squares values.
    fn zero_solution(&self, penalty: &[f64]) -> Vec<f64> {
        let free: Vec<usize> = (0..penalty.len()).filter(|&q| penalty[q] == 0.0).collect();
        let mut beta = vec![0.0; penalty.len()];
        if free.is_empty() {
            return beta;
        }
        let gff = DMatrix::from_fn(free.len(), free.len(), |a, b| self.g[(free[a], free[b])]);
        let cf = DVector::from_iterator(free.len(), free.iter().map(|&q| self.c[q]));
        let sol = match crate::linalg::solve_spd(&gff, &cf) {
            Some(s) => s,
            None => gff
                .svd(true, true)
                .solve(&cf, 1e-12)
                .unwrap_or_else(|_| DVector::zeros(free.len())),
        };
        for (a, &q) in free.iter().enumerate() {
            beta[q] = sol[a];
        }
        beta
    }

    fn lambda_max(&self, penalty: &[f64]) -> f64 {
        let base = self.zero_solution(penalty);
        let p = penalty.len();
        (0..p)
            .filter(|&q| penalty[q] > 0.0)
            .map(|q| {
                let fitted: f64 = (0..p).map(|r| self.g[(q, r)] * base[r]).sum();
                2.0 * (self.c[q] - fitted).abs() / penalty[q]
            })
            .fold(0.0, f64::max)
    }
}

/// Coordinate descent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Convergence threshold on the largest coefficient change in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_sweeps: 100_000,
        }
    }
}

/// Smallest λ at which every penalized coefficient is zero:
/// max_q |2 Σ_j (w_j/w̄) z_jq r_j| over penalized q, with r the residual of the
/// free columns' least-squares fit (r = ỹ when nothing is free).
pub fn lambda_max(design: &StandardizedDesign) -> f64 {
    design.gram().lambda_max(&design.penalty)
}

#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Runs cyclic sweeps until the largest change drops below `tol`.
/// Returns false if `budget` sweeps were not enough.
fn descend(
    gram: &Gram,
    penalty: &[f64],
    lambda: f64,
    beta: &mut [f64],
    tol: f64,
    budget: usize,
    used: &mut usize,
) -> bool {
    let p = beta.len();
    let g = &gram.g;
    let mut gb: Vec<f64> = (0..p)
        .map(|q| (0..p).map(|r| g[(q, r)] * beta[r]).sum())
        .collect();
    let mut prev_obj = if cfg!(debug_assertions) {
        gram.objective(beta, lambda, penalty)
    } else {
        0.0
    };
    for _ in 0..budget {
        *used += 1;
        let mut max_change = 0.0_f64;
        for q in 0..p {
            let gqq = g[(q, q)];
            let old = beta[q];
            let new = if gqq > 0.0 {
                let rho = gram.c[q] - (gb[q] - gqq * old);
                soft_threshold(rho, 0.5 * lambda * penalty[q]) / gqq
            } else {
                0.0
            };
            let d = new - old;
            if d != 0.0 {
                beta[q] = new;
                for r in 0..p {
                    gb[r] += g[(r, q)] * d;
                }
                max_change = max_change.max(d.abs());
            }
        }
        if cfg!(debug_assertions) {
            let obj = gram.objective(beta, lambda, penalty);
            debug_assert!(
                obj <= prev_obj + 1e-9 * (1.0 + prev_obj.abs()),
                "coordinate sweep increased the objective: {prev_obj} -> {obj}"
            );
            prev_obj = obj;
        }
        if max_change < tol {
            return true;
        }
    }
    false
}

/// Fits with a precomputed Gram matrix. Sweeps are tightened until the fit
/// passes the KKT check at `kkt_tol`, within the sweep budget.
pub(crate) fn solve(
    design: &StandardizedDesign,
    gram: &Gram,
    lmax: f64,
    lambda: f64,
    warm_start: Option<&[f64]>,
    settings: &SolverSettings,
    kkt_tol: f64,
) -> Result<Vec<f64>> {
    if lambda >= lmax {
        return Ok(gram.zero_solution(&design.penalty));
    }
    let mut beta = match warm_start {
        Some(b) => b.to_vec(),
        None => vec![0.0; design.p()],
    };
    let mut tol = settings.tol;
    let mut used = 0;
    for _ in 0..5 {
        let budget = settings.max_sweeps - used;
        if !descend(gram, &design.penalty, lambda, &mut beta, tol, budget, &mut used) {
            return Err(Error::MaxIterationsExceeded {
                limit: settings.max_sweeps,
                lambda,
            });
        }
        if kkt_check(design, &beta, lambda, kkt_tol).pass {
            break;
        }
        tol /= 100.0;
    }
    Ok(beta)
}

/// Minimizes the penalized objective at a single λ.
pub fn fit_lasso(
    design: &StandardizedDesign,
    lambda: f64,
    warm_start: Option<&[f64]>,
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidGrid(format!("lambda must be >= 0, got {lambda}")));
    }
    let gram = design.gram();
    let lmax = gram.lambda_max(&design.penalty);
    solve(design, &gram, lmax, lambda, warm_start, settings, KKT_REL_TOL * lmax)
}

/// Stationarity certificate for a lasso solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub lambda: f64,
    pub tol: f64,
    /// 2 Σ_j (w_j/w̄) z_jq r_j per coefficient.
    pub gradient: Vec<f64>,
    pub max_violation: f64,
    pub pass: bool,
}

/// Checks the subgradient conditions with residuals recomputed from scratch:
/// |g_q − λπ_q sgn(δ_q)| ≤ tol where δ_q ≠ 0, and |g_q| ≤ λπ_q + tol where
/// δ_q = 0.
pub fn kkt_check(design: &StandardizedDesign, coefs: &[f64], lambda: f64, tol: f64) -> KktReport {
    let r = design.residuals(coefs);
    let mut gradient = Vec::with_capacity(design.p());
    let mut max_violation = 0.0_f64;
    for q in 0..design.p() {
        let g: f64 = 2.0
            * (0..design.m())
                .map(|j| design.row_weights[j] * design.z[(j, q)] * r[j])
                .sum::<f64>();
        let bound = lambda * design.penalty[q];
        let violation = if coefs[q] != 0.0 {
            (g - bound * coefs[q].signum()).abs()
        } else {
            (g.abs() - bound).max(0.0)
        };
        max_violation = max_violation.max(violation);
        gradient.push(g);
    }
    KktReport {
        lambda,
        tol,
        gradient,
        max_violation,
        pass: max_violation <= tol,
    }
}
