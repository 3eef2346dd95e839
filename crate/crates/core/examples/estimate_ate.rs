//! Two-stage estimate on a CSV study, or on a simulated one when no path is given.
//!
//! cargo run --release --example estimate_ate -- [study.csv]

use clustered_lasso::data::{load_study, CsvSchema};
use clustered_lasso::report::two_stage_table;
use clustered_lasso::sim::{draw_assignment, generate_population, observed_frame, rep_rng};
use clustered_lasso::{run_two_stage, PipelineConfig, SimConfig};

fn main() -> clustered_lasso::Result<()> {
    let frame = match std::env::args().nth(1) {
        Some(path) => load_study(path, &CsvSchema::default())?,
        None => {
            let cfg = SimConfig::default();
            let pop = generate_population(&cfg, 11)?;
            let treated = draw_assignment(cfg.m, cfg.treated_count(), &mut rep_rng(11, 0));
            observed_frame(&pop, &treated)?
        }
    };
    let report = run_two_stage(&frame, &PipelineConfig::default())?;
    print!("{}", two_stage_table(&report));
    Ok(())
}
