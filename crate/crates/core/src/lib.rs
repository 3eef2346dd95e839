//! Two-stage Lasso-OLS estimation of average treatment effects in clustered
//! randomized trials, with design-based standard errors.
//!
//! Stage 1 selects covariates with a weighted lasso on cluster means, λ chosen
//! by leave-one-cluster-out CV. Stage 2 refits by WLS on individual records
//! and reports a conservative design-based variance.
//!
//! ```no_run
//! use clustered_lasso::{data::{load_study, CsvSchema}, pipeline::{run_two_stage, PipelineConfig}};
//!
//! let frame = load_study("study.csv", &CsvSchema::default())?;
//! let report = run_two_stage(&frame, &PipelineConfig::default())?;
//! println!("ATE {:.3} (se {:.3})", report.estimate.estimate, report.estimate.se);
//! # Ok::<(), clustered_lasso::Error>(())
//! ```

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod lasso;
mod linalg;
pub mod pipeline;
pub mod report;
pub mod sim;
pub mod stats;
pub mod wls;

pub use data::{aggregate, ClusterFrame, CsvSchema, IndividualRecord, StudyFrame};
pub use error::{Error, Result};
pub use pipeline::{run_two_stage, PipelineConfig, TwoStageReport};
pub use sim::{run_simulation, SimConfig, SimReport};
pub use wls::{estimate_ate, AteEstimate};
