//! Precision gain of lasso-selected covariates over a pretest-only model.

use clustered_lasso::pipeline::compare_to_baseline;
use clustered_lasso::report::two_stage_table;
use clustered_lasso::sim::{draw_assignment, generate_population, observed_frame, rep_rng};
use clustered_lasso::{PipelineConfig, SimConfig};

fn main() -> clustered_lasso::Result<()> {
    let cfg = SimConfig { m: 60, ..Default::default() };
    let pop = generate_population(&cfg, 8)?;
    let treated = draw_assignment(cfg.m, cfg.treated_count(), &mut rep_rng(8, 0));
    let frame = observed_frame(&pop, &treated)?;

    // x1 plays the pretest: always in the model
    let pc = PipelineConfig { forced_covariates: vec!["x1".into()], ..Default::default() };
    let report = compare_to_baseline(&frame, &["x1".to_string()], &pc)?;
    print!("{}", two_stage_table(&report));
    Ok(())
}
