//! Weighted lasso path on cluster means, with a KKT certificate for every fit.

use clustered_lasso::data::{aggregate, center_and_standardize, StandardizeOptions};
use clustered_lasso::lasso::{fit_path, kkt_check, lambda_grid, lambda_max, SolverSettings};
use clustered_lasso::report::path_table;
use clustered_lasso::sim::{draw_assignment, generate_population, observed_frame, rep_rng};
use clustered_lasso::SimConfig;

fn main() -> clustered_lasso::Result<()> {
    let cfg = SimConfig { m: 30, ..Default::default() };
    let pop = generate_population(&cfg, 5)?;
    let treated = draw_assignment(cfg.m, cfg.treated_count(), &mut rep_rng(5, 0));
    let cf = aggregate(&observed_frame(&pop, &treated)?);
    let design = center_and_standardize(&cf, StandardizeOptions::default())?;

    let lmax = lambda_max(&design);
    let grid = lambda_grid(lmax, 20, 1e-3);
    let path = fit_path(&design, &grid, &SolverSettings::default())?;
    print!("{}", path_table(&path));

    // re-check the last fit independently of the solver
    let last = path.coefs.last().unwrap();
    let kkt = kkt_check(&design, last, *grid.last().unwrap(), 1e-6 * lmax);
    println!("last fit: max violation {:.2e}, pass {}", kkt.max_violation, kkt.pass);
    println!("true covariates: {:?}", pop.true_support.iter().map(|q| q + 1).collect::<Vec<_>>());
    Ok(())
}
