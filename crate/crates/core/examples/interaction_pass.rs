//! Forced pretest plus a second lasso over pairwise interactions of the
//! selected covariates.

use clustered_lasso::data::IndividualRecord;
use clustered_lasso::report::two_stage_table;
use clustered_lasso::{run_two_stage, PipelineConfig, StudyFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

fn main() -> clustered_lasso::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (m, v) = (60, 6);
    let mut records = Vec::new();
    let mut assignment = BTreeMap::new();
    for j in 0..m {
        let id = format!("s{j:02}");
        assignment.insert(id.clone(), j % 5 < 3);
        let xc: Vec<f64> = (0..v).map(|_| rng.sample(StandardNormal)).collect();
        let u: f64 = rng.sample::<f64, _>(StandardNormal) * 0.3;
        for _ in 0..30 {
            let x: Vec<f64> = xc.iter().map(|c| c + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            let y = 1.0 * x[0] + 0.8 * x[1] + 0.6 * x[2] + 0.9 * x[1] * x[2] + u + rng.sample::<f64, _>(StandardNormal);
            records.push(IndividualRecord { cluster_id: id.clone(), y, x, w: 1.0 });
        }
    }
    let mut names: Vec<String> = vec!["pretest".into()];
    names.extend((1..v).map(|q| format!("x{q}")));
    let frame = StudyFrame::from_records(records, &assignment, names)?;

    let cfg = PipelineConfig {
        forced_covariates: vec!["pretest".into()],
        interaction_pass: true,
        baseline_covariates: Some(vec!["pretest".into()]),
        ..Default::default()
    };
    let report = run_two_stage(&frame, &cfg)?;
    print!("{}", two_stage_table(&report));
    println!("interaction candidates: {:?}", report.interaction_candidates);
    Ok(())
}
