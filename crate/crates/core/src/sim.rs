//! Monte Carlo harness.
//!
//! A finite population of clusters is drawn once per base sample:
//!
//! ```text
//! Y0_ij = Σ_{q ≤ k} x_ijq γ_q + u_j + e_ij
//! Y1_ij = Y0_ij + τ_j + θ_ij
//! x_ij  = u_X,j + e_X,ij,   Cov = AR(1) with parameter ρ
//! ```
//!
//! Each replication then re-randomizes treatment across clusters and runs the
//! two-stage estimator alongside WLS on the true covariates.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{aggregate, StudyFrame};
use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::pipeline::{run_two_stage, LassoConfig, PipelineConfig};
use crate::report::config_hash;
use crate::stats::{excess_kurtosis, mean, sample_sd, skewness};
use crate::wls::{estimate_ate, R2Weighting};

/// How covariate variance is split between cluster and individual parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateNoise {
    /// Var(u_X) = icc·Σ, Var(e_X) = (1 − icc)·Σ.
    #[default]
    SplitByIcc,
    /// Both parts get the full Σ.
    JointFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub m: usize,
    /// Share of clusters treated.
    pub p: f64,
    /// Number of true covariates (the first k).
    pub k: usize,
    /// Total covariates.
    pub v: usize,
    pub rho: f64,
    pub icc: f64,
    pub r2_target: f64,
    /// Treatment-effect variance as a share of Var(Y0).
    pub het_frac: f64,
    pub nj_min: usize,
    pub nj_max: usize,
    pub n_reps: usize,
    pub n_base_samples: usize,
    pub seed: u64,
    pub alpha: f64,
    pub covariate_noise: CovariateNoise,
    /// When positive, the last covariate is replaced by a noise variable with
    /// this correlation to the signed sum of the true covariates.
    pub decoy_correlation: f64,
    pub lasso: LassoConfig,
    pub r2_weighting: R2Weighting,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            m: 40,
            p: 0.6,
            k: 5,
            v: 10,
            rho: 0.0,
            icc: 0.1,
            r2_target: 0.5,
            het_frac: 0.05,
            nj_min: 40,
            nj_max: 80,
            n_reps: 1000,
            n_base_samples: 1,
            seed: 0,
            alpha: 0.05,
            covariate_noise: CovariateNoise::SplitByIcc,
            decoy_correlation: 0.0,
            lasso: LassoConfig::default(),
            r2_weighting: R2Weighting::Individual,
        }
    }
}

impl SimConfig {
    /// Number of treated clusters, round(m·p).
    pub fn treated_count(&self) -> usize {
        (self.m as f64 * self.p).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad(format!("p = {} must lie in (0, 1)", self.p));
        }
        let m1 = self.treated_count();
        if m1 == 0 || m1 >= self.m {
            return bad(format!("m = {} and p = {} leave an arm empty", self.m, self.p));
        }
        if self.k > self.v {
            return bad(format!("k = {} exceeds v = {}", self.k, self.v));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho = {} must lie in [0, 1)", self.rho));
        }
        if !(self.icc > 0.0 && self.icc < 1.0) {
            return bad(format!("icc = {} must lie in (0, 1)", self.icc));
        }
        if !(self.r2_target > 0.0 && self.r2_target < 1.0) {
            return bad(format!("r2_target = {} must lie in (0, 1)", self.r2_target));
        }
        if !(self.het_frac >= 0.0 && self.het_frac.is_finite()) {
            return bad(format!("het_frac = {} must be >= 0", self.het_frac));
        }
        if self.nj_min == 0 || self.nj_min > self.nj_max {
            return bad(format!("cluster sizes [{}, {}] invalid", self.nj_min, self.nj_max));
        }
        if self.n_base_samples == 0 {
            return bad("n_base_samples must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha = {} must lie in (0, 1)", self.alpha));
        }
        if !(0.0..1.0).contains(&self.decoy_correlation) {
            return bad("decoy_correlation must lie in [0, 1)".into());
        }
        if self.decoy_correlation > 0.0 && (self.v <= self.k || self.k == 0) {
            return bad("a decoy needs k >= 1 and at least one noise covariate".into());
        }
        Ok(())
    }
}

/// Variance parameters solved from the targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// Var(Σ x_q γ_q).
    pub signal: f64,
    pub var_u: f64,
    pub var_e: f64,
    pub var_tau: f64,
    pub var_theta: f64,
    /// Multipliers of Σ for the cluster and individual covariate parts.
    pub covariate_cluster_scale: f64,
    pub covariate_individual_scale: f64,
    pub var_y0: f64,
}

/// AR(1) correlation matrix ρ^|g−h|.
pub fn ar1(v: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(v, v, |g, h| rho.powi(g.abs_diff(h) as i32))
}

/// Sets Var(u) + Var(e) so the true covariates explain `r2_target` of Var(Y0),
/// split by `icc`; the treatment-effect variance is `het_frac`·Var(Y0), split
/// the same way.
pub fn solve_variance_components(cfg: &SimConfig, gamma: &[f64]) -> VarianceComponents {
    let (cs, is) = match cfg.covariate_noise {
        CovariateNoise::SplitByIcc => (cfg.icc, 1.0 - cfg.icc),
        CovariateNoise::JointFull => (1.0, 1.0),
    };
    let sigma = ar1(gamma.len(), cfg.rho);
    let mut quad = 0.0;
    for g in 0..gamma.len() {
        for h in 0..gamma.len() {
            quad += gamma[g] * sigma[(g, h)] * gamma[h];
        }
    }
    let signal = (cs + is) * quad;
    let noise = signal * (1.0 - cfg.r2_target) / cfg.r2_target;
    let var_y0 = signal + noise;
    let het = cfg.het_frac * var_y0;
    VarianceComponents {
        signal,
        var_u: cfg.icc * noise,
        var_e: (1.0 - cfg.icc) * noise,
        var_tau: cfg.icc * het,
        var_theta: (1.0 - cfg.icc) * het,
        covariate_cluster_scale: cs,
        covariate_individual_scale: is,
        var_y0,
    }
}

/// Both potential outcomes for every individual of a fixed set of clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePopulation {
    pub cluster_sizes: Vec<usize>,
    pub cluster_of: Vec<usize>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// Row-major n × v.
    pub x: Vec<f64>,
    pub v: usize,
    pub gamma: Vec<f64>,
    /// Covariate positions with nonzero γ.
    pub true_support: Vec<usize>,
    pub components: VarianceComponents,
    pub covariate_names: Vec<String>,
}

impl FinitePopulation {
    pub fn n(&self) -> usize {
        self.y0.len()
    }

    pub fn m(&self) -> usize {
        self.cluster_sizes.len()
    }

    /// Σ_j w_j (Ȳ_j(1) − Ȳ_j(0)) / Σ_j w_j with unit individual weights.
    pub fn realized_ate(&self) -> f64 {
        let d: f64 = self.y1.iter().zip(&self.y0).map(|(a, b)| a - b).sum();
        d / self.n() as f64
    }
}

/// Seed of base sample `base`.
pub fn population_seed(seed: u64, base: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(base as u64 + 1);
    rng.random()
}

/// Random stream for replication `rep` of the population drawn from
/// `pop_seed`; independent of how replications are scheduled.
pub fn rep_rng(pop_seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(pop_seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_population(cfg: &SimConfig, seed: u64) -> Result<FinitePopulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..cfg.m).map(|_| rng.random_range(cfg.nj_min..=cfg.nj_max)).collect();
    let t3 = StudentT::new(3.0).expect("valid degrees of freedom");
    let gamma: Vec<f64> = (0..cfg.k).map(|_| t3.sample(&mut rng)).collect();
    let comp = solve_variance_components(cfg, &gamma);
    let v = cfg.v;
    let chol = ar1(v, cfg.rho)
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("covariance not positive definite".into()))?
        .l();
    let correlated = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> {
        let z: Vec<f64> = (0..v).map(|_| normal(rng)).collect();
        (0..v)
            .map(|g| scale.sqrt() * (0..=g).map(|h| chol[(g, h)] * z[h]).sum::<f64>())
            .collect()
    };
    let decoy = cfg.decoy_correlation;
    let sign_scale = if decoy > 0.0 {
        let s: Vec<f64> = gamma.iter().map(|g| g.signum()).collect();
        let sig = ar1(cfg.k, cfg.rho);
        let mut q = 0.0;
        for g in 0..cfg.k {
            for h in 0..cfg.k {
                q += s[g] * sig[(g, h)] * s[h];
            }
        }
        q.sqrt()
    } else {
        1.0
    };
    let n: usize = sizes.iter().sum();
    let mut cluster_of = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n * v);
    for (j, &nj) in sizes.iter().enumerate() {
        let ux = correlated(&mut rng, comp.covariate_cluster_scale);
        let u = comp.var_u.sqrt() * normal(&mut rng);
        let tau = comp.var_tau.sqrt() * normal(&mut rng);
        for _ in 0..nj {
            let ex = correlated(&mut rng, comp.covariate_individual_scale);
            let mut xi: Vec<f64> = ux.iter().zip(&ex).map(|(a, b)| a + b).collect();
            if decoy > 0.0 {
                let s: f64 = (0..cfg.k).map(|q| gamma[q].signum() * xi[q]).sum::<f64>() / sign_scale;
                xi[v - 1] = decoy * s + (1.0 - decoy * decoy).sqrt() * xi[v - 1];
            }
            let signal: f64 = (0..cfg.k).map(|q| xi[q] * gamma[q]).sum();
            let e = comp.var_e.sqrt() * normal(&mut rng);
            let theta = comp.var_theta.sqrt() * normal(&mut rng);
            let base = signal + u + e;
            cluster_of.push(j);
            y0.push(base);
            y1.push(base + tau + theta);
            x.extend_from_slice(&xi);
        }
    }
    Ok(FinitePopulation {
        cluster_sizes: sizes,
        cluster_of,
        y0,
        y1,
        x,
        v,
        true_support: (0..cfg.k).filter(|&q| gamma[q] != 0.0).collect(),
        gamma,
        components: comp,
        covariate_names: (1..=v).map(|q| format!("x{q}")).collect(),
    })
}

/// Complete randomization of `m1` of `m` clusters.
pub fn draw_assignment<R: Rng>(m: usize, m1: usize, rng: &mut R) -> Vec<bool> {
    let mut treated = vec![false; m];
    for j in rand::seq::index::sample(rng, m, m1) {
        treated[j] = true;
    }
    treated
}

fn cluster_label(j: usize, m: usize) -> String {
    let width = m.saturating_sub(1).to_string().len();
    format!("c{j:0width$}")
}

/// The observed study: Y1 for treated clusters, Y0 otherwise, unit weights.
pub fn observed_frame(pop: &FinitePopulation, treated: &[bool]) -> Result<StudyFrame> {
    let m = pop.m();
    let y = pop
        .cluster_of
        .iter()
        .enumerate()
        .map(|(i, &j)| if treated[j] { pop.y1[i] } else { pop.y0[i] })
        .collect();
    StudyFrame::from_columns(
        (0..m).map(|j| cluster_label(j, m)).collect(),
        treated.to_vec(),
        pop.cluster_of.clone(),
        y,
        vec![1.0; pop.n()],
        pop.x.clone(),
        pop.covariate_names.clone(),
    )
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub base: usize,
    pub rep: usize,
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub df: usize,
    pub n_selected: usize,
    pub n_true_selected: usize,
    pub exact_support: bool,
    pub treatment_selected: bool,
    pub lambda_selected: f64,
    /// Estimate and SE from WLS on the true covariates.
    pub true_model_estimate: f64,
    pub true_model_se: f64,
}

pub fn run_replication(
    pop: &FinitePopulation,
    cfg: &SimConfig,
    pop_seed: u64,
    base: usize,
    rep: usize,
) -> Result<ReplicationRecord> {
    let mut rng = rep_rng(pop_seed, rep);
    let treated = draw_assignment(cfg.m, cfg.treated_count(), &mut rng);
    let frame = observed_frame(pop, &treated)?;
    let pc = PipelineConfig {
        alpha: cfg.alpha,
        lasso: cfg.lasso,
        r2_weighting: cfg.r2_weighting,
        ..Default::default()
    };
    let report = run_two_stage(&frame, &pc)?;
    let cf = aggregate(&frame);
    let truth = estimate_ate(&frame, &cf, &pop.true_support, cfg.r2_weighting, cfg.alpha)?;
    let sel = &report.selected_indices;
    let n_true_selected = sel.iter().filter(|q| pop.true_support.contains(q)).count();
    let e = &report.estimate;
    Ok(ReplicationRecord {
        base,
        rep,
        estimate: e.estimate,
        se: e.se,
        p_value: e.p_value,
        ci_low: e.ci_low,
        ci_high: e.ci_high,
        df: e.df,
        n_selected: sel.len(),
        n_true_selected,
        exact_support: n_true_selected == pop.true_support.len() && sel.len() == n_true_selected,
        treatment_selected: report.treatment_selected,
        lambda_selected: report.lambda_selected,
        true_model_estimate: truth.estimate,
        true_model_se: truth.se,
    })
}

/// Per-base-sample summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSummary {
    pub base: usize,
    pub completed: usize,
    pub failed: usize,
    pub avg_total_selected: f64,
    pub avg_true_selected: f64,
    pub exact_support_rate: f64,
    pub avg_bias: f64,
    pub type1_error: f64,
    pub coverage: f64,
    pub avg_se: f64,
    /// SD of the true-covariate estimates.
    pub true_se: f64,
    /// SD of the two-stage estimates.
    pub estimate_sd: f64,
    pub avg_true_model_se: f64,
    pub realized_ate: f64,
    pub outcome_sd: f64,
}

/// Averages over base samples. Rejections and coverage are measured against
/// zero: under the null the realized ATE is close to but not exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config_hash: String,
    pub seed: u64,
    pub m: usize,
    pub k: usize,
    pub v: usize,
    pub rho: f64,
    pub p: f64,
    pub n_base_samples: usize,
    pub n_reps: usize,
    pub completed: usize,
    pub failed: usize,
    pub avg_total_selected: f64,
    pub avg_true_selected: f64,
    pub exact_support_rate: f64,
    pub treatment_selected_rate: f64,
    /// Mean of the estimate minus the true-covariate estimate.
    pub avg_bias: f64,
    pub type1_error: f64,
    pub coverage: f64,
    pub avg_se: f64,
    /// SD across replications of the estimates from the true-covariate model.
    pub true_se: f64,
    /// SD across replications of the two-stage estimates.
    pub estimate_sd: f64,
    pub avg_true_model_se: f64,
    pub realized_ate: f64,
    pub outcome_sd: f64,
    /// Shape of (β̂ − mean) / SD(β̂), pooled over base samples.
    pub standardized_skewness: f64,
    pub standardized_excess_kurtosis: f64,
    pub base_samples: Vec<BaseSummary>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

fn summarize(base: usize, recs: &[ReplicationRecord], failed: usize, pop: &FinitePopulation, alpha: f64) -> BaseSummary {
    let n = recs.len() as f64;
    let frac = |f: &dyn Fn(&ReplicationRecord) -> bool| recs.iter().filter(|r| f(r)).count() as f64 / n;
    let est: Vec<f64> = recs.iter().map(|r| r.estimate).collect();
    let truth: Vec<f64> = recs.iter().map(|r| r.true_model_estimate).collect();
    BaseSummary {
        base,
        completed: recs.len(),
        failed,
        avg_total_selected: recs.iter().map(|r| r.n_selected as f64).sum::<f64>() / n,
        avg_true_selected: recs.iter().map(|r| r.n_true_selected as f64).sum::<f64>() / n,
        exact_support_rate: frac(&|r| r.exact_support),
        avg_bias: recs.iter().map(|r| r.estimate - r.true_model_estimate).sum::<f64>() / n,
        type1_error: frac(&|r| r.p_value < alpha),
        coverage: frac(&|r| r.ci_low <= 0.0 && 0.0 <= r.ci_high),
        avg_se: recs.iter().map(|r| r.se).sum::<f64>() / n,
        true_se: sample_sd(&truth),
        estimate_sd: sample_sd(&est),
        avg_true_model_se: recs.iter().map(|r| r.true_model_se).sum::<f64>() / n,
        realized_ate: pop.realized_ate(),
        outcome_sd: sample_sd(&pop.y0),
    }
}

/// Runs the simulation and also returns every replication record.
pub fn run_simulation_detailed(cfg: &SimConfig) -> Result<(SimReport, Vec<ReplicationRecord>)> {
    cfg.validate()?;
    if cfg.n_reps == 0 {
        return Err(Error::NoReplications);
    }
    let start = Instant::now();
    let total = cfg.n_reps * cfg.n_base_samples;
    let mut all = Vec::with_capacity(total);
    let mut bases = Vec::with_capacity(cfg.n_base_samples);
    let mut standardized = Vec::with_capacity(total);
    let mut failed_total = 0;
    let mut treat_sel = 0usize;
    for base in 0..cfg.n_base_samples {
        let seed = population_seed(cfg.seed, base);
        let pop = generate_population(cfg, seed)?;
        let outcomes: Vec<Result<ReplicationRecord>> = (0..cfg.n_reps)
            .into_par_iter()
            .map(|rep| run_replication(&pop, cfg, seed, base, rep))
            .collect();
        let mut recs = Vec::with_capacity(cfg.n_reps);
        let mut failed = 0;
        for (rep, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(r) => recs.push(r),
                Err(e) if e.is_numerical() => {
                    log::warn!("base {base}, replication {rep} failed: {e}");
                    failed += 1;
                }
                Err(e) => return Err(e),
            }
        }
        failed_total += failed;
        if failed_total as f64 > 0.05 * total as f64 {
            return Err(Error::FailureRateExceeded { failed: failed_total, total });
        }
        if recs.is_empty() {
            return Err(Error::NoReplications);
        }
        let s = summarize(base, &recs, failed, &pop, cfg.alpha);
        let mu = mean(&recs.iter().map(|r| r.estimate).collect::<Vec<_>>());
        standardized.extend(recs.iter().map(|r| (r.estimate - mu) / s.estimate_sd));
        treat_sel += recs.iter().filter(|r| r.treatment_selected).count();
        bases.push(s);
        all.extend(recs);
    }
    let avg = |f: fn(&BaseSummary) -> f64| bases.iter().map(f).sum::<f64>() / bases.len() as f64;
    let report = SimReport {
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        m: cfg.m,
        k: cfg.k,
        v: cfg.v,
        rho: cfg.rho,
        p: cfg.p,
        n_base_samples: cfg.n_base_samples,
        n_reps: cfg.n_reps,
        completed: all.len(),
        failed: failed_total,
        avg_total_selected: avg(|b| b.avg_total_selected),
        avg_true_selected: avg(|b| b.avg_true_selected),
        exact_support_rate: avg(|b| b.exact_support_rate),
        treatment_selected_rate: treat_sel as f64 / all.len() as f64,
        avg_bias: avg(|b| b.avg_bias),
        type1_error: avg(|b| b.type1_error),
        coverage: avg(|b| b.coverage),
        avg_se: avg(|b| b.avg_se),
        true_se: avg(|b| b.true_se),
        estimate_sd: avg(|b| b.estimate_sd),
        avg_true_model_se: avg(|b| b.avg_true_model_se),
        realized_ate: avg(|b| b.realized_ate),
        outcome_sd: avg(|b| b.outcome_sd),
        standardized_skewness: skewness(&standardized),
        standardized_excess_kurtosis: excess_kurtosis(&standardized),
        base_samples: bases,
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    log::info!(
        "simulation finished: {} replications in {:.1}s",
        report.completed,
        report.runtime_secs
    );
    Ok((report, all))
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimReport> {
    run_simulation_detailed(cfg).map(|r| r.0)
}

/// The finite-population variance of the ATE estimator and of γ̂ for a given
/// covariate set and treated share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinitePopVariance {
    pub p: f64,
    pub covariates: Vec<usize>,
    /// Population projection coefficients.
    pub gamma: Vec<f64>,
    pub s2_eps1: f64,
    pub s2_eps0: f64,
    pub s2_eps10: f64,
    pub s2_w: f64,
    /// Asymptotic variance of √m (β̂₁ − β₁).
    pub v_ate: f64,
    /// V_ATE / m.
    pub var_ate: f64,
    /// Row-major k × k.
    pub v_gamma: Vec<f64>,
}

pub fn true_finite_pop_variance(pop: &FinitePopulation, p: f64, covariates: &[usize]) -> Result<FinitePopVariance> {
    let m = pop.m();
    let k = covariates.len();
    let mf = m as f64;
    let mut w = vec![0.0; m];
    let mut y1 = vec![0.0; m];
    let mut y0 = vec![0.0; m];
    let mut xb = vec![0.0; m * k];
    for i in 0..pop.n() {
        let j = pop.cluster_of[i];
        w[j] += 1.0;
        y1[j] += pop.y1[i];
        y0[j] += pop.y0[i];
        for (c, &q) in covariates.iter().enumerate() {
            xb[j * k + c] += pop.x[i * pop.v + q];
        }
    }
    for j in 0..m {
        y1[j] /= w[j];
        y0[j] /= w[j];
        for c in 0..k {
            xb[j * k + c] /= w[j];
        }
    }
    let sw: f64 = w.iter().sum();
    let wbar = sw / mf;
    let wmean = |vals: &dyn Fn(usize) -> f64| (0..m).map(|j| w[j] * vals(j)).sum::<f64>() / sw;
    let g1 = wmean(&|j| y1[j]);
    let g0 = wmean(&|j| y0[j]);
    let xg: Vec<f64> = (0..k).map(|c| wmean(&|j| xb[j * k + c])).collect();
    let xt = |j: usize, c: usize| xb[j * k + c] - xg[c];
    let rel: Vec<f64> = w.iter().map(|x| x / wbar).collect();

    let s2x = DMatrix::from_fn(k, k, |a, b| (0..m).map(|j| rel[j] * xt(j, a) * xt(j, b)).sum::<f64>() / mf);
    let sxy = |y: &[f64], g: f64| -> Vec<f64> {
        (0..k)
            .map(|c| (0..m).map(|j| rel[j] * xt(j, c) * (y[j] - g)).sum::<f64>() / mf)
            .collect()
    };
    let (sx1, sx0) = (sxy(&y1, g1), sxy(&y0, g0));
    let rhs = nalgebra::DVector::from_iterator(k, (0..k).map(|c| p * sx1[c] + (1.0 - p) * sx0[c]));
    let gamma = if k == 0 {
        nalgebra::DVector::zeros(0)
    } else {
        solve_spd(&s2x, &rhs).ok_or_else(|| Error::RankDeficient("population covariates".into()))?
    };
    let eps = |y: &[f64], g: f64| -> Vec<f64> {
        (0..m)
            .map(|j| y[j] - g - (0..k).map(|c| xt(j, c) * gamma[c]).sum::<f64>())
            .collect()
    };
    let (e1, e0) = (eps(&y1, g1), eps(&y0, g0));
    let cov = |a: &[f64], b: &[f64]| (0..m).map(|j| rel[j] * rel[j] * a[j] * b[j]).sum::<f64>() / (mf - 1.0);
    let s2_eps1 = cov(&e1, &e1);
    let s2_eps0 = cov(&e0, &e0);
    let s2_eps10 = cov(&e1, &e0);
    let s2_w = w.iter().map(|x| (x - wbar).powi(2)).sum::<f64>() / (mf - 1.0);
    let v_ate = (1.0 - p) / p * s2_eps1 + p / (1.0 - p) * s2_eps0 + 2.0 * s2_eps10;

    let v_gamma = if k == 0 {
        Vec::new()
    } else {
        let resid = |e: &[f64]| -> Vec<Vec<f64>> {
            let r: Vec<Vec<f64>> = (0..m).map(|j| (0..k).map(|c| xt(j, c) * e[j]).collect()).collect();
            let centers: Vec<f64> = (0..k).map(|c| wmean(&|j| r[j][c])).collect();
            r.iter().map(|row| row.iter().zip(&centers).map(|(a, b)| a - b).collect()).collect()
        };
        let (r1, r0) = (resid(&e1), resid(&e0));
        let s2r = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            DMatrix::from_fn(k, k, |g, h| {
                (0..m).map(|j| rel[j] * rel[j] * a[j][g] * b[j][h]).sum::<f64>() / (mf - 1.0)
            })
        };
        let vr = (s2r(&r1, &r1) + s2r(&r0, &r0) - s2r(&r1, &r0) - s2r(&r0, &r1)) * (p * (1.0 - p));
        let inv = s2x
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::RankDeficient("population covariates".into()))?;
        let vg = &inv * vr * &inv;
        vg.transpose().as_slice().to_vec()
    };
    Ok(FinitePopVariance {
        p,
        covariates: covariates.to_vec(),
        gamma: gamma.as_slice().to_vec(),
        s2_eps1,
        s2_eps0,
        s2_eps10,
        s2_w,
        v_ate,
        var_ate: v_ate / mf,
        v_gamma,
    })
}

/// Realized R² of Y0 on the true covariates and the ANOVA intra-class
/// correlation of Y0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizedMoments {
    pub r2: f64,
    pub icc: f64,
}

pub fn realized_moments(pop: &FinitePopulation) -> Result<RealizedMoments> {
    let n = pop.n();
    let k = pop.true_support.len();
    let ybar = mean(&pop.y0);
    let mut xtx = DMatrix::zeros(k + 1, k + 1);
    let mut xty = nalgebra::DVector::zeros(k + 1);
    let row = |i: usize| {
        let mut r = vec![1.0];
        r.extend(pop.true_support.iter().map(|&q| pop.x[i * pop.v + q]));
        r
    };
    for i in 0..n {
        let r = row(i);
        for a in 0..=k {
            xty[a] += r[a] * pop.y0[i];
            for b in 0..=k {
                xtx[(a, b)] += r[a] * r[b];
            }
        }
    }
    let beta = solve_spd(&xtx, &xty).ok_or_else(|| Error::RankDeficient("true covariates".into()))?;
    let (mut ssr, mut sst) = (0.0, 0.0);
    for i in 0..n {
        let fit: f64 = row(i).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        ssr += (pop.y0[i] - fit).powi(2);
        sst += (pop.y0[i] - ybar).powi(2);
    }
    let m = pop.m();
    let mut sums = vec![0.0; m];
    for i in 0..n {
        sums[pop.cluster_of[i]] += pop.y0[i];
    }
    let means: Vec<f64> = sums.iter().zip(&pop.cluster_sizes).map(|(s, &c)| s / c as f64).collect();
    let ssb: f64 = means.iter().zip(&pop.cluster_sizes).map(|(mu, &c)| c as f64 * (mu - ybar).powi(2)).sum();
    let ssw: f64 = (0..n).map(|i| (pop.y0[i] - means[pop.cluster_of[i]]).powi(2)).sum();
    let nf = n as f64;
    let msb = ssb / (m as f64 - 1.0);
    let msw = ssw / (nf - m as f64);
    let n0 = (nf - pop.cluster_sizes.iter().map(|&c| (c * c) as f64).sum::<f64>() / nf) / (m as f64 - 1.0);
    Ok(RealizedMoments {
        r2: 1.0 - ssr / sst,
        icc: (msb - msw) / (msb + (n0 - 1.0) * msw),
    })
}
