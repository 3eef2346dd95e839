//! Leave-one-cluster-out choice of λ and the covariates it keeps.

use clustered_lasso::data::aggregate;
use clustered_lasso::pipeline::{stage_one, LassoConfig};
use clustered_lasso::sim::{draw_assignment, generate_population, observed_frame, rep_rng};
use clustered_lasso::SimConfig;

fn main() -> clustered_lasso::Result<()> {
    let cfg = SimConfig::default();
    let pop = generate_population(&cfg, 21)?;
    let treated = draw_assignment(cfg.m, cfg.treated_count(), &mut rep_rng(21, 0));
    let cf = aggregate(&observed_frame(&pop, &treated)?);

    let s1 = stage_one(&cf, &[], &(0..cfg.v).collect::<Vec<_>>(), &LassoConfig::default())?;
    let path = &s1.path;
    let cv = path.cv_errors.as_ref().unwrap();
    let best = path.selected_index.unwrap();
    for i in (0..path.lambda_grid.len()).step_by(10) {
        println!("lambda {:>10.5}  nonzero {:>2}  cv {:>10.4}", path.lambda_grid[i], path.nonzero_counts[i], cv[i]);
    }
    println!("chosen lambda {:.5} (index {best}), cv {:.4}", path.lambda_grid[best], cv[best]);
    println!("selected: {:?}", s1.selection.names);
    println!("true:     {:?}", pop.true_support.iter().map(|q| format!("x{}", q + 1)).collect::<Vec<_>>());
    println!("treatment coefficient {:.4}", s1.selection.treatment_coefficient);
    Ok(())
}
