//! Irrepresentable condition on simulated designs, with and without a decoy
//! covariate built from the true ones.

use clustered_lasso::data::aggregate;
use clustered_lasso::diagnostics::{irrepresentable_check, selection_consistency_probe};
use clustered_lasso::pipeline::{stage_one, LassoConfig};
use clustered_lasso::report::probe_table;
use clustered_lasso::sim::{draw_assignment, generate_population, observed_frame, rep_rng};
use clustered_lasso::SimConfig;

fn margin(cfg: &SimConfig) -> clustered_lasso::Result<f64> {
    let pop = generate_population(cfg, 9)?;
    let treated = draw_assignment(cfg.m, cfg.treated_count(), &mut rep_rng(9, 0));
    let cf = aggregate(&observed_frame(&pop, &treated)?);
    let s1 = stage_one(&cf, &[], &(0..cfg.v).collect::<Vec<_>>(), &LassoConfig::default())?;
    let support: Vec<usize> = pop.true_support.iter().map(|q| q + 1).collect();
    let signs: Vec<f64> = pop.gamma.iter().map(|g| g.signum()).collect();
    Ok(irrepresentable_check(&s1.design, &support, &signs)?.min_margin)
}

fn main() -> clustered_lasso::Result<()> {
    let base = SimConfig { m: 160, n_reps: 100, seed: 4, ..Default::default() };
    let decoy = SimConfig { decoy_correlation: 0.95, ..base.clone() };
    println!("min margin, independent covariates: {:.3}", margin(&base)?);
    println!("min margin, with decoy:             {:.3}", margin(&decoy)?);

    for (label, cfg) in [("independent", &base), ("decoy", &decoy)] {
        println!("\n{label}");
        print!("{}", probe_table(&selection_consistency_probe(cfg, &[20, 40, 80, 160])?));
    }
    Ok(())
}
