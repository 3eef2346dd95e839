#![allow(dead_code)]

use clustered_lasso::data::IndividualRecord;
use clustered_lasso::{ClusterFrame, StudyFrame};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::collections::BTreeMap;

/// Random cluster-level data with unequal weights and a balanced assignment.
pub fn random_cluster_frame<R: Rng>(rng: &mut R, m: usize, v: usize) -> ClusterFrame {
    let ids: Vec<String> = (0..m).map(|j| format!("c{j:03}")).collect();
    let treated: Vec<bool> = (0..m).map(|j| j % 2 == 0).collect();
    let weights: Vec<f64> = (0..m).map(|_| rng.random_range(5.0..60.0)).collect();
    let xbar: Vec<f64> = (0..m * v).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ybar: Vec<f64> = (0..m)
        .map(|j| {
            let t = if treated[j] { 0.4 } else { 0.0 };
            let signal: f64 = (0..v).map(|q| xbar[j * v + q] * (q as f64 - 1.0)).sum();
            t + signal + rng.random_range(-1.0..1.0)
        })
        .collect();
    let names = (0..v).map(|q| format!("x{q}")).collect();
    ClusterFrame::from_rows(ids, treated, weights, ybar, xbar, names, (0..v).collect())
}

/// Cluster-level design rebuilt from scratch: column 0 is T − p*, the others
/// covariates centered at the weighted grand mean and scaled to unit weighted
/// SD with divisor m − 1.
pub struct OracleDesign {
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    pub a: DVector<f64>,
}

pub fn oracle_design(cf: &ClusterFrame) -> OracleDesign {
    let m = cf.weights.len();
    let v = cf.covariate_names.len();
    let total: f64 = cf.weights.iter().sum();
    let a = DVector::from_iterator(m, cf.weights.iter().map(|w| w * m as f64 / total));
    let wmean = |f: &dyn Fn(usize) -> f64| (0..m).map(|j| cf.weights[j] * f(j)).sum::<f64>() / total;
    let p = wmean(&|j| if cf.treated[j] { 1.0 } else { 0.0 });
    let ybar = wmean(&|j| cf.ybar[j]);
    let mut z = DMatrix::zeros(m, v + 1);
    for j in 0..m {
        z[(j, 0)] = if cf.treated[j] { 1.0 - p } else { -p };
    }
    for q in 0..v {
        let mu = wmean(&|j| cf.xbar[j * v + q]);
        let ss: f64 = (0..m).map(|j| a[j] * (cf.xbar[j * v + q] - mu).powi(2)).sum();
        let sd = (ss / (m as f64 - 1.0)).sqrt();
        for j in 0..m {
            z[(j, q + 1)] = (cf.xbar[j * v + q] - mu) / sd;
        }
    }
    let y = DVector::from_iterator(m, cf.ybar.iter().map(|y| y - ybar));
    OracleDesign { z, y, a }
}

pub fn objective(d: &OracleDesign, beta: &DVector<f64>, lambda: f64, penalty: &[f64]) -> f64 {
    let r = &d.y - &d.z * beta;
    let sse: f64 = r.iter().zip(d.a.iter()).map(|(r, a)| a * r * r).sum();
    sse + lambda * beta.iter().zip(penalty).map(|(b, f)| f * b.abs()).sum::<f64>()
}

/// Exact lasso minimizer by enumerating sign patterns. For each pattern s the
/// stationarity condition 2 G_AA δ_A = 2 c_A − λ π_A s_A is solved; patterns
/// whose solution has signs matching s are feasible and the lowest objective
/// among them is the global minimum.
pub fn brute_force_lasso(d: &OracleDesign, lambda: f64, penalty: &[f64]) -> DVector<f64> {
    let p = d.z.ncols();
    let za = DMatrix::from_fn(d.z.nrows(), p, |j, q| d.z[(j, q)] * d.a[j]);
    let g = d.z.transpose() * &za;
    let c = za.transpose() * &d.y;
    let mut best = DVector::zeros(p);
    let mut best_obj = objective(d, &best, lambda, penalty);
    let patterns = 3usize.pow(p as u32);
    for code in 1..patterns {
        let mut s = vec![0i32; p];
        let mut rest = code;
        for slot in s.iter_mut() {
            *slot = (rest % 3) as i32 - 1;
            rest /= 3;
        }
        let active: Vec<usize> = (0..p).filter(|&q| s[q] != 0).collect();
        let k = active.len();
        let gaa = DMatrix::from_fn(k, k, |i, l| g[(active[i], active[l])]);
        let rhs = DVector::from_iterator(k, (0..k).map(|i| {
            let q = active[i];
            c[q] - 0.5 * lambda * penalty[q] * s[q] as f64
        }));
        let Some(sol) = gaa.cholesky().map(|ch| ch.solve(&rhs)) else { continue };
        let consistent = active
            .iter()
            .enumerate()
            .all(|(i, &q)| penalty[q] == 0.0 || sol[i] * s[q] as f64 > 0.0);
        if !consistent {
            continue;
        }
        let mut beta = DVector::zeros(p);
        for (i, &q) in active.iter().enumerate() {
            beta[q] = sol[i];
        }
        let obj = objective(d, &beta, lambda, penalty);
        if obj < best_obj {
            best_obj = obj;
            best = beta;
        }
    }
    best
}

/// Largest subgradient violation of `beta`, from the oracle design.
pub fn kkt_violation(d: &OracleDesign, beta: &[f64], lambda: f64, penalty: &[f64]) -> f64 {
    let b = DVector::from_column_slice(beta);
    let r = &d.y - &d.z * &b;
    let ar = r.component_mul(&d.a);
    let grad = d.z.transpose() * ar * 2.0;
    (0..beta.len())
        .map(|q| {
            let bound = lambda * penalty[q];
            if beta[q] != 0.0 {
                (grad[q] - bound * beta[q].signum()).abs()
            } else {
                (grad[q].abs() - bound).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// (cluster, treated, y, w, x) rows to a study frame.
pub fn study(rows: &[(&str, bool, f64, f64, &[f64])], names: &[&str]) -> StudyFrame {
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
        .expect("valid frame")
}
