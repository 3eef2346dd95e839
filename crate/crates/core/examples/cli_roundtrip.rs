//! Writes a simulated study to CSV, reads it back, and checks the estimate is
//! unchanged bit for bit.

use clustered_lasso::data::{load_study, save_study, CsvSchema};
use clustered_lasso::sim::{draw_assignment, generate_population, observed_frame, rep_rng};
use clustered_lasso::{run_two_stage, PipelineConfig, SimConfig};

fn main() -> clustered_lasso::Result<()> {
    let cfg = SimConfig { m: 24, ..Default::default() };
    let pop = generate_population(&cfg, 2)?;
    let frame = observed_frame(&pop, &draw_assignment(cfg.m, cfg.treated_count(), &mut rep_rng(2, 0)))?;
    let path = std::env::temp_dir().join("clustered_lasso_roundtrip.csv");
    save_study(&frame, &path)?;
    let back = load_study(&path, &CsvSchema::default())?;

    let a = run_two_stage(&frame, &PipelineConfig::default())?;
    let b = run_two_stage(&back, &PipelineConfig::default())?;
    println!("in memory {:.17e}\nfrom csv  {:.17e}", a.estimate.estimate, b.estimate.estimate);
    assert_eq!(a.estimate.estimate.to_bits(), b.estimate.estimate.to_bits());
    println!("written to {}", path.display());
    Ok(())
}
