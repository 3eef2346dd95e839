//! Monte Carlo runs over cluster counts, covariate counts and correlation.
//!
//! cargo run --release --example monte_carlo -- [reps] [seed]

use clustered_lasso::report::sim_table;
use clustered_lasso::{run_simulation, SimConfig};

fn main() -> clustered_lasso::Result<()> {
    let mut args = std::env::args().skip(1);
    let reps: usize = args.next().map_or(200, |a| a.parse().expect("reps"));
    let seed: u64 = args.next().map_or(2024, |a| a.parse().expect("seed"));

    let rows = [(20, 3, 0.0), (40, 5, 0.0), (80, 5, 0.0), (80, 5, 0.5)];
    let mut reports = Vec::new();
    for (m, k, rho) in rows {
        let cfg = SimConfig { m, k, rho, n_reps: reps, seed, ..Default::default() };
        let r = run_simulation(&cfg)?;
        eprintln!("m={m} k={k} rho={rho}: {:.1}s, {} failed", r.runtime_secs, r.failed);
        reports.push(r);
    }
    print!("{}", sim_table(&reports));
    Ok(())
}
