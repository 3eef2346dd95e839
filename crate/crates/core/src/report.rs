//! Config hashing and aligned text tables.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::diagnostics::{IrrepresentabilityReport, ProbeReport};
use crate::lasso::LassoPath;
use crate::pipeline::TwoStageReport;
use crate::sim::SimReport;

/// Hex SHA-256 of the value's JSON serialization.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Left-aligned first column, right-aligned numbers.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (c, cell) in row.iter().enumerate().take(cols) {
            widths[c] = widths[c].max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            let pad = widths[c] - cell.chars().count();
            if c > 0 {
                s.push_str("  ");
            }
            if c == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
    out.push_str(&"─".repeat(total));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn sim_table(reports: &[SimReport]) -> String {
    let header = [
        "Parameters",
        "Total",
        "True",
        "Average bias",
        "Type 1 error",
        "Coverage rate",
        "Average SE",
        "True SE",
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                format!("m={}, k={}, v={}, ρ={}", r.m, r.k, r.v, r.rho),
                format!("{:.1}", r.avg_total_selected),
                format!("{:.1}", r.avg_true_selected),
                format!("{:.3}", r.avg_bias),
                format!("{:.3}", r.type1_error),
                format!("{:.3}", r.coverage),
                format!("{:.3}", r.avg_se),
                format!("{:.3}", r.true_se),
            ]
        })
        .collect();
    render_table(&header, &rows)
}

pub fn two_stage_table(r: &TwoStageReport) -> String {
    let mut rows = Vec::new();
    let mut push = |label: &str, e: &crate::wls::AteEstimate| {
        rows.push(vec![
            label.to_string(),
            format!("{:.4}", e.estimate),
            format!("{:.4}", e.se),
            format!("{:.3}", e.t_stat),
            e.df.to_string(),
            format!("{:.4}", e.p_value),
            format!("[{:.4}, {:.4}]", e.ci_low, e.ci_high),
            e.k.to_string(),
        ]);
    };
    push("lasso-OLS", &r.estimate);
    if let Some(b) = &r.baseline {
        push("baseline", b);
    }
    let mut out = render_table(&["Model", "ATE", "SE", "t", "df", "p", "CI", "k"], &rows);
    let list = |v: &[String]| if v.is_empty() { "(none)".to_string() } else { v.join(", ") };
    out.push_str(&format!("clusters: {}, individuals: {}\n", r.n_clusters, r.n_individuals));
    out.push_str(&format!(
        "lambda selected: {:.6} (lambda max {:.6}, {} grid points)\n",
        r.lambda_selected, r.lambda_max, r.n_lambda
    ));
    out.push_str(&format!("selected: {}\n", list(&r.selected_covariates)));
    if !r.forced_covariates.is_empty() {
        out.push_str(&format!("forced: {}\n", list(&r.forced_covariates)));
    }
    if !r.interaction_candidates.is_empty() {
        out.push_str(&format!("interactions: {}\n", list(&r.selected_interactions)));
    }
    if let Some(s) = r.se_reduction {
        out.push_str(&format!("SE reduction vs baseline: {:.1}%\n", 100.0 * s));
    }
    out
}

pub fn path_table(path: &LassoPath) -> String {
    let rows: Vec<Vec<String>> = path
        .lambda_grid
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mark = if path.selected_index == Some(i) { " *" } else { "" };
            vec![
                format!("{l:.6e}{mark}"),
                path.nonzero_counts[i].to_string(),
                path.cv_errors.as_ref().map_or(String::new(), |e| format!("{:.6}", e[i])),
                format!("{:.2e}", path.kkt_violations[i]),
            ]
        })
        .collect();
    render_table(&["lambda", "nonzero", "cv error", "kkt violation"], &rows)
}

pub fn irrepresentable_table(r: &IrrepresentabilityReport, names: &[String]) -> String {
    let rows: Vec<Vec<String>> = r
        .non_support
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            vec![
                names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                format!("{:.4}", r.projection[i]),
                format!("{:.4}", r.eta_margin[i]),
            ]
        })
        .collect();
    let mut out = render_table(&["column", "|Q_NI Q_II^-1 s|", "margin"], &rows);
    out.push_str(&format!("holds: {} (min margin {:.4})\n", r.holds, r.min_margin));
    out
}

pub fn probe_table(r: &ProbeReport) -> String {
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|p| {
            vec![
                p.m.to_string(),
                format!("{:.3}", p.exact_rate),
                format!("{:.3}", p.contains_rate),
                format!("{:.2}", p.avg_true_selected),
                format!("{:.2}", p.avg_false_selected),
                p.min_margin.map_or("-".into(), |x| format!("{x:.3}")),
            ]
        })
        .collect();
    render_table(
        &["m", "exact", "contains", "true sel", "false sel", "margin"],
        &rows,
    )
}
