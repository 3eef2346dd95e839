//! Command-line front end: `estimate`, `lasso`, `simulate`, `diagnose`.
//!
//! Every JSON output is wrapped with the command name, a hash of the
//! effective configuration (and input file), and the seed. Exit codes: 0 ok,
//! 2 input error, 3 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{aggregate, load_study, save_study, CsvSchema};
use crate::diagnostics::{
    irrepresentable_check, r2_treatment_on_covariates, r2_treatment_on_individual_covariates,
    selection_consistency_probe,
    IrrepresentabilityReport, ProbeReport,
};
use crate::error::{Error, Result};
use crate::lasso::{write_path_csv, LassoPath, Selection};
use crate::pipeline::{run_two_stage, stage_one, PipelineConfig};
use crate::report::{self, config_hash};
use crate::wls::R2Weighting;
use crate::sim::{
    draw_assignment, generate_population, observed_frame, population_seed, rep_rng,
    run_simulation, SimConfig,
};

#[derive(Debug, Parser)]
#[command(name = "cluster-lasso", version, about = "Lasso-OLS ATE estimation for clustered RCTs")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Worker threads for replications and CV folds.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Two-stage ATE estimate for a CSV study.
    Estimate(EstimateArgs),
    /// Stage-1 lasso path, CV curve and KKT report.
    Lasso(LassoArgs),
    /// Monte Carlo study from a JSON SimConfig.
    Simulate(SimulateArgs),
    /// Irrepresentable check on data, or a selection-consistency probe.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// JSON with `schema` and pipeline keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub forced_covariates: Vec<String>,
    #[arg(long)]
    pub unweighted_standardize: bool,
    #[arg(long)]
    pub standardize_outcome: bool,
    /// Recorded in the output; estimation itself is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',')]
    pub baseline_covariates: Vec<String>,
    /// Screen pairwise interactions of the selected covariates.
    #[arg(long)]
    pub interactions: bool,
    #[arg(long)]
    pub repenalize_mains: bool,
}

#[derive(Debug, Args)]
pub struct LassoArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub n_lambda: Option<usize>,
    #[arg(long)]
    pub lambda_min_ratio: Option<f64>,
    /// Path coefficients, one row per λ.
    #[arg(long)]
    pub emit_path_csv: Option<PathBuf>,
    /// CV curve points (lambda, cv_error).
    #[arg(long)]
    pub cv_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Write the observed data of base sample 0, replication 0 as CSV.
    #[arg(long)]
    pub dump_one: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Study CSV: irrepresentable check on the fitted support.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Data config with `--input`, SimConfig otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "20,40,80,160")]
    pub ms: Vec<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Config file for the data subcommands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub schema: CsvSchema,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Serialize)]
pub struct Output<'a, T: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub report: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoReport {
    pub path: LassoPath,
    pub selection: Selection,
    pub kkt_tol: f64,
    pub max_kkt_violation: f64,
    pub kkt_pass: bool,
    pub dropped_constant: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub irrepresentable: Option<IrrepresentabilityReport>,
    pub r2_treatment_on_selected: Option<f64>,
    pub probe: Option<ProbeReport>,
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn emit<T: Serialize>(out: Option<&Path>, output: &Output<'_, T>, table: &str) -> Result<()> {
    let json = serde_json::to_string_pretty(output)?;
    match out {
        Some(p) => {
            fs::write(p, json + "\n")?;
            print!("{table}");
        }
        None => {
            eprint!("{table}");
            println!("{json}");
        }
    }
    std::io::stdout().flush()?;
    Ok(())
}

fn data_config(args: &DataArgs) -> Result<DataConfig> {
    let mut cfg: DataConfig = read_json(args.config.as_deref())?;
    if let Some(a) = args.alpha {
        cfg.pipeline.alpha = a;
    }
    if !args.forced_covariates.is_empty() {
        cfg.pipeline.forced_covariates = args.forced_covariates.clone();
    }
    if args.unweighted_standardize {
        cfg.pipeline.lasso.standardize.weighted = false;
    }
    if args.standardize_outcome {
        cfg.pipeline.lasso.standardize.standardize_outcome = true;
    }
    Ok(cfg)
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let mut cfg = data_config(&args.data)?;
    if !args.baseline_covariates.is_empty() {
        cfg.pipeline.baseline_covariates = Some(args.baseline_covariates.clone());
    }
    cfg.pipeline.interaction_pass |= args.interactions;
    cfg.pipeline.repenalize_mains |= args.repenalize_mains;
    let frame = load_study(&args.data.input, &cfg.schema)?;
    let rep = run_two_stage(&frame, &cfg.pipeline)?;
    let output = Output {
        command: "estimate",
        version: env!("CARGO_PKG_VERSION"),
        config_hash: config_hash(&(&cfg, file_digest(&args.data.input)?)),
        seed: args.data.seed,
        report: &rep,
    };
    emit(args.data.out.as_deref(), &output, &report::two_stage_table(&rep))
}

pub fn cmd_lasso(args: &LassoArgs) -> Result<()> {
    let mut cfg = data_config(&args.data)?;
    if let Some(n) = args.n_lambda {
        cfg.pipeline.lasso.n_lambda = n;
    }
    if let Some(r) = args.lambda_min_ratio {
        cfg.pipeline.lasso.lambda_min_ratio = r;
    }
    let frame = load_study(&args.data.input, &cfg.schema)?;
    let forced: Vec<usize> = cfg
        .pipeline
        .forced_covariates
        .iter()
        .map(|n| frame.covariate_index(n))
        .collect::<Result<_>>()?;
    let candidates: Vec<usize> = match &cfg.pipeline.candidate_covariates {
        Some(names) => names.iter().map(|n| frame.covariate_index(n)).collect::<Result<_>>()?,
        None => (0..frame.v()).filter(|q| !forced.contains(q)).collect(),
    };
    let s1 = stage_one(&aggregate(&frame), &forced, &candidates, &cfg.pipeline.lasso)?;
    if let Some(p) = &args.emit_path_csv {
        write_path_csv(&s1.path, fs::File::create(p)?)?;
    }
    if let Some(p) = &args.cv_csv {
        let mut w = csv::Writer::from_path(p).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let errors = s1.path.cv_errors.clone().unwrap_or_default();
        w.write_record(["lambda", "cv_error"]).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (l, e) in s1.path.lambda_grid.iter().zip(&errors) {
            w.write_record([l.to_string(), e.to_string()])
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        w.flush()?;
    }
    let max_kkt = s1.path.kkt_violations.iter().copied().fold(0.0, f64::max);
    let names = frame.covariate_names();
    let rep = LassoReport {
        kkt_tol: s1.path.kkt_tol,
        max_kkt_violation: max_kkt,
        kkt_pass: max_kkt <= s1.path.kkt_tol,
        dropped_constant: s1.dropped_constant.iter().map(|&q| names[q].clone()).collect(),
        selection: s1.selection,
        path: s1.path,
    };
    let output = Output {
        command: "lasso",
        version: env!("CARGO_PKG_VERSION"),
        config_hash: config_hash(&(&cfg, file_digest(&args.data.input)?)),
        seed: args.data.seed,
        report: &rep,
    };
    emit(args.data.out.as_deref(), &output, &report::path_table(&rep.path))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg: SimConfig = read_json(args.config.as_deref())?;
    cfg.seed = args.seed;
    if let Some(r) = args.reps {
        cfg.n_reps = r;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    cfg.validate()?;
    if let Some(path) = &args.dump_one {
        let seed = population_seed(cfg.seed, 0);
        let pop = generate_population(&cfg, seed)?;
        let treated = draw_assignment(cfg.m, cfg.treated_count(), &mut rep_rng(seed, 0));
        save_study(&observed_frame(&pop, &treated)?, path)?;
    }
    let rep = run_simulation(&cfg)?;
    let table = format!(
        "{}replications: {} completed, {} failed, {:.1}s\n",
        report::sim_table(std::slice::from_ref(&rep)),
        rep.completed,
        rep.failed,
        rep.runtime_secs
    );
    let output = Output {
        command: "simulate",
        version: env!("CARGO_PKG_VERSION"),
        config_hash: rep.config_hash.clone(),
        seed: Some(cfg.seed),
        report: &rep,
    };
    emit(args.out.as_deref(), &output, &table)
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    match &args.input {
        Some(input) => {
            let cfg: DataConfig = read_json(args.config.as_deref())?;
            let frame = load_study(input, &cfg.schema)?;
            let cf = aggregate(&frame);
            let candidates: Vec<usize> = (0..frame.v()).collect();
            let s1 = stage_one(&cf, &[], &candidates, &cfg.pipeline.lasso)?;
            let b = &s1.path.coefs[s1.path.selected_index.unwrap_or(0)];
            let support: Vec<usize> = (0..b.len()).filter(|&c| b[c] != 0.0).collect();
            let signs: Vec<f64> = support.iter().map(|&c| b[c].signum()).collect();
            let irr = irrepresentable_check(&s1.design, &support, &signs)?;
            let chosen = &s1.selection.covariates;
            let r2 = match cfg.pipeline.r2_weighting {
                R2Weighting::Individual => r2_treatment_on_individual_covariates(&frame, &cf, chosen)?,
                other => r2_treatment_on_covariates(&cf, chosen, other)?,
            };
            let mut table = report::irrepresentable_table(&irr, &s1.design.column_names);
            table.push_str(&format!("R^2 of treatment on selected covariates: {r2:.4}\n"));
            let rep = DiagnoseReport {
                irrepresentable: Some(irr),
                r2_treatment_on_selected: Some(r2),
                probe: None,
            };
            let output = Output {
                command: "diagnose",
                version: env!("CARGO_PKG_VERSION"),
                config_hash: config_hash(&(&cfg, file_digest(input)?)),
                seed: args.seed,
                report: &rep,
            };
            emit(args.out.as_deref(), &output, &table)
        }
        None => {
            let mut cfg: SimConfig = read_json(args.config.as_deref())?;
            cfg.seed = args
                .seed
                .ok_or_else(|| Error::InvalidConfig("--seed is required for the selection probe".into()))?;
            if let Some(r) = args.reps {
                cfg.n_reps = r;
            }
            let probe = selection_consistency_probe(&cfg, &args.ms)?;
            let table = report::probe_table(&probe);
            let output = Output {
                command: "diagnose",
                version: env!("CARGO_PKG_VERSION"),
                config_hash: probe.config_hash.clone(),
                seed: Some(cfg.seed),
                report: &DiagnoseReport {
                    irrepresentable: None,
                    r2_treatment_on_selected: None,
                    probe: Some(probe),
                },
            };
            emit(args.out.as_deref(), &output, &table)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Lasso(a) => cmd_lasso(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
