mod common;

use clustered_lasso::data::IndividualRecord;
use clustered_lasso::diagnostics::{irrepresentable_check, r2_treatment_on_individual_covariates};
use clustered_lasso::data::{center_and_standardize, StandardizeOptions};
use clustered_lasso::sim::{draw_assignment, generate_population, observed_frame, rep_rng};
use clustered_lasso::{aggregate, run_two_stage, PipelineConfig, SimConfig, StudyFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

fn interaction_study(seed: u64) -> StudyFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
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
            let y = x[0] + 0.8 * x[1] + 0.6 * x[2] + 0.9 * x[1] * x[2] + u + rng.sample::<f64, _>(StandardNormal);
            records.push(IndividualRecord { cluster_id: id.clone(), y, x, w: 1.0 });
        }
    }
    let names = (0..v).map(|q| format!("x{q}")).collect();
    StudyFrame::from_records(records, &assignment, names).unwrap()
}

#[test]
fn planted_interaction_is_found() {
    let cfg = PipelineConfig {
        forced_covariates: vec!["x0".into()],
        interaction_pass: true,
        ..Default::default()
    };
    let hits = (0..100)
        .filter(|&s| {
            let r = run_two_stage(&interaction_study(s), &cfg).unwrap();
            r.selected_interactions.iter().any(|i| i == "x1:x2")
        })
        .count();
    assert!(hits >= 90, "found in {hits} of 100");
}

#[test]
fn hand_example_with_a_covariate() {
    // Reference values from a separate numpy implementation.
    let frame = common::study(
        &[
            ("a", true, 2.0, 1.0, &[0.5]),
            ("a", true, 3.5, 2.0, &[1.0]),
            ("b", true, 1.0, 1.0, &[-0.3]),
            ("b", true, 2.2, 0.5, &[0.4]),
            ("b", true, 4.0, 1.5, &[1.1]),
            ("c", false, 0.4, 1.0, &[0.2]),
            ("c", false, 1.1, 1.0, &[-0.6]),
            ("d", false, 2.5, 2.0, &[0.9]),
            ("d", false, 0.3, 1.0, &[-1.2]),
            ("d", false, 1.7, 0.5, &[0.0]),
        ],
        &["x"],
    );
    let cf = aggregate(&frame);
    assert!((cf.p_star - 6.0 / 11.5).abs() < 1e-15);
    let r2 = r2_treatment_on_individual_covariates(&frame, &cf, &[0]).unwrap();
    assert!((r2 - 0.19110125463064564).abs() < 1e-12);
}

#[test]
fn ar1_projection_tends_to_rho() {
    let cfg = SimConfig { m: 3000, k: 1, v: 2, rho: 0.5, nj_min: 5, nj_max: 10, ..Default::default() };
    let pop = generate_population(&cfg, 5).unwrap();
    let frame = observed_frame(&pop, &draw_assignment(cfg.m, cfg.treated_count(), &mut rep_rng(5, 0))).unwrap();
    let d = center_and_standardize(&aggregate(&frame), StandardizeOptions::default()).unwrap();
    let r = irrepresentable_check(&d, &[1], &[1.0]).unwrap();
    let x2 = r.non_support.iter().position(|&c| c == 2).unwrap();
    assert!((r.projection[x2] - 0.5).abs() < 0.05, "{}", r.projection[x2]);
}

#[test]
fn treatment_covariate_r2_is_small_under_randomization() {
    let cfg = SimConfig { m: 500, nj_min: 10, nj_max: 20, ..Default::default() };
    let pop = generate_population(&cfg, 9).unwrap();
    let frame = observed_frame(&pop, &draw_assignment(cfg.m, cfg.treated_count(), &mut rep_rng(9, 0))).unwrap();
    let r2 = r2_treatment_on_individual_covariates(&frame, &aggregate(&frame), &[0, 1, 2]).unwrap();
    assert!(r2 < 0.02, "{r2}");
}

#[test]
fn forced_pretest_always_reaches_stage_two() {
    let cfg = SimConfig { m: 30, ..Default::default() };
    let pop = generate_population(&cfg, 21).unwrap();
    let pc = PipelineConfig { forced_covariates: vec!["x10".into()], ..Default::default() };
    for rep in 0..10 {
        let frame = observed_frame(&pop, &draw_assignment(cfg.m, cfg.treated_count(), &mut rep_rng(21, rep))).unwrap();
        let r = run_two_stage(&frame, &pc).unwrap();
        assert!(r.stage2_covariates.iter().any(|c| c == "x10"));
        assert!(!r.selected_covariates.iter().any(|c| c == "x10"));
    }
}
