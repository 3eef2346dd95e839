//! Randomization distribution of the unadjusted ATE on a fixed population
//! against the finite-population variance formula.

use clustered_lasso::data::aggregate;
use clustered_lasso::sim::{draw_assignment, generate_population, observed_frame, rep_rng, true_finite_pop_variance};
use clustered_lasso::stats::sample_sd;
use clustered_lasso::wls::{estimate_ate, R2Weighting};
use clustered_lasso::SimConfig;

fn main() -> clustered_lasso::Result<()> {
    let cfg = SimConfig { het_frac: 0.3, ..Default::default() };
    let pop = generate_population(&cfg, 3)?;
    let m1 = cfg.treated_count();
    let p = m1 as f64 / cfg.m as f64;

    let draws = 4000;
    let estimates: Vec<f64> = (0..draws)
        .map(|r| {
            let treated = draw_assignment(cfg.m, m1, &mut rep_rng(3, r));
            let f = observed_frame(&pop, &treated).unwrap();
            estimate_ate(&f, &aggregate(&f), &[], R2Weighting::default(), 0.05).unwrap().estimate
        })
        .collect();

    let fv = true_finite_pop_variance(&pop, p, &[])?;
    println!("realized ATE          {:.5}", pop.realized_ate());
    println!("empirical SD          {:.5}", sample_sd(&estimates));
    println!("sqrt(V_ATE / m)       {:.5}", fv.var_ate.sqrt());

    let adj = true_finite_pop_variance(&pop, p, &pop.true_support)?;
    println!("with true covariates  {:.5}", adj.var_ate.sqrt());
    Ok(())
}
