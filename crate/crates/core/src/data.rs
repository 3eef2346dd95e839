//! Individual- and cluster-level study data.
//!
//! A [`StudyFrame`] holds the observed individual records of a clustered trial
//! together with the cluster-level treatment assignment. [`aggregate`] reduces
//! it to weighted cluster means ([`ClusterFrame`]), and
//! [`center_and_standardize`] turns those into the centered, scaled design the
//! stage-1 lasso runs on.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lasso::StandardizedDesign;

/// Name of the treatment column in standardized designs.
pub const TREATMENT_COLUMN: &str = "treatment";

#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRecord {
    pub cluster_id: String,
    pub y: f64,
    pub x: Vec<f64>,
    pub w: f64,
}

/// Observed individual-level data plus cluster assignments.
///
/// Clusters are stored sorted by id; records keep their input order. Covariates
/// are held row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFrame {
    cluster_ids: Vec<String>,
    treated: Vec<bool>,
    cluster_of: Vec<usize>,
    y: Vec<f64>,
    w: Vec<f64>,
    x: Vec<f64>,
    covariate_names: Vec<String>,
}

impl StudyFrame {
    pub fn from_records(
        records: Vec<IndividualRecord>,
        assignment: &BTreeMap<String, bool>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let index: BTreeMap<&str, usize> = assignment
            .keys()
            .enumerate()
            .map(|(j, id)| (id.as_str(), j))
            .collect();
        let v = covariate_names.len();
        let mut cluster_of = Vec::with_capacity(records.len());
        let mut y = Vec::with_capacity(records.len());
        let mut w = Vec::with_capacity(records.len());
        let mut x = Vec::with_capacity(records.len() * v);
        for (row, rec) in records.into_iter().enumerate() {
            if rec.x.len() != v {
                return Err(Error::CovariateLength {
                    row,
                    found: rec.x.len(),
                    expected: v,
                });
            }
            let j = *index
                .get(rec.cluster_id.as_str())
                .ok_or_else(|| Error::UnassignedCluster(rec.cluster_id.clone()))?;
            cluster_of.push(j);
            y.push(rec.y);
            w.push(rec.w);
            x.extend_from_slice(&rec.x);
        }
        Self::from_columns(
            assignment.keys().cloned().collect(),
            assignment.values().copied().collect(),
            cluster_of,
            y,
            w,
            x,
            covariate_names,
        )
    }

    /// Builds a frame from column storage. `cluster_ids` must be unique;
    /// clusters are re-sorted by id and `cluster_of` remapped accordingly.
    pub fn from_columns(
        cluster_ids: Vec<String>,
        treated: Vec<bool>,
        cluster_of: Vec<usize>,
        y: Vec<f64>,
        w: Vec<f64>,
        x: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let m = cluster_ids.len();
        let n = y.len();
        let v = covariate_names.len();
        if treated.len() != m {
            return Err(Error::InvalidConfig(
                "treatment vector length differs from cluster count".into(),
            ));
        }
        if cluster_of.len() != n || w.len() != n || x.len() != n * v {
            return Err(Error::InvalidConfig("column lengths disagree".into()));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| cluster_ids[a].cmp(&cluster_ids[b]));
        for pair in order.windows(2) {
            if cluster_ids[pair[0]] == cluster_ids[pair[1]] {
                return Err(Error::InvalidConfig(format!(
                    "duplicate cluster id `{}`",
                    cluster_ids[pair[0]]
                )));
            }
        }
        let mut rank = vec![0; m];
        for (new, &old) in order.iter().enumerate() {
            rank[old] = new;
        }
        let sorted_ids: Vec<String> = order.iter().map(|&j| cluster_ids[j].clone()).collect();
        let sorted_treated: Vec<bool> = order.iter().map(|&j| treated[j]).collect();

        let mut counts = vec![0usize; m];
        let mut remapped = Vec::with_capacity(n);
        for (row, &j) in cluster_of.iter().enumerate() {
            if j >= m {
                return Err(Error::InvalidConfig(format!(
                    "row {row} refers to cluster index {j} of {m}"
                )));
            }
            let r = rank[j];
            counts[r] += 1;
            remapped.push(r);
            if !(w[row].is_finite() && w[row] > 0.0) {
                return Err(Error::NonPositiveWeight {
                    row,
                    weight: w[row],
                });
            }
            if !y[row].is_finite() {
                return Err(Error::NonFinite {
                    row,
                    column: "outcome".into(),
                });
            }
            if let Some(q) = x[row * v..(row + 1) * v].iter().position(|a| !a.is_finite()) {
                return Err(Error::NonFinite {
                    row,
                    column: covariate_names[q].clone(),
                });
            }
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyCluster(sorted_ids[j].clone()));
        }
        if !sorted_treated.iter().any(|&t| t) {
            return Err(Error::EmptyArm("treatment"));
        }
        if sorted_treated.iter().all(|&t| t) {
            return Err(Error::EmptyArm("control"));
        }
        Ok(Self {
            cluster_ids: sorted_ids,
            treated: sorted_treated,
            cluster_of: remapped,
            y,
            w,
            x,
            covariate_names,
        })
    }

    /// Number of individuals.
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of clusters.
    pub fn m(&self) -> usize {
        self.cluster_ids.len()
    }

    /// Number of covariates.
    pub fn v(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn cluster_ids(&self) -> &[String] {
        &self.cluster_ids
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    pub fn cluster_of(&self) -> &[usize] {
        &self.cluster_of
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let v = self.v();
        &self.x[i * v..(i + 1) * v]
    }

    pub fn x(&self, i: usize, q: usize) -> f64 {
        self.x[i * self.v() + q]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    /// Records in input order.
    pub fn records(&self) -> impl Iterator<Item = IndividualRecord> + '_ {
        (0..self.n()).map(move |i| IndividualRecord {
            cluster_id: self.cluster_ids[self.cluster_of[i]].clone(),
            y: self.y[i],
            x: self.x_row(i).to_vec(),
            w: self.w[i],
        })
    }

    /// Copy with every individual weight multiplied by `c`.
    pub fn scale_weights(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.w.iter_mut().for_each(|w| *w *= c);
        out
    }

    /// Copy with extra covariate columns appended. `columns[k][i]` is the value
    /// of the k-th new covariate for individual i.
    pub fn with_covariates(&self, names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let n = self.n();
        let v = self.v();
        let extra = names.len();
        if columns.len() != extra || columns.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidConfig("appended covariate columns malformed".into()));
        }
        let mut x = Vec::with_capacity(n * (v + extra));
        for i in 0..n {
            x.extend_from_slice(self.x_row(i));
            x.extend(columns.iter().map(|c| c[i]));
        }
        let mut covariate_names = self.covariate_names.clone();
        covariate_names.extend(names);
        Ok(Self {
            x,
            covariate_names,
            ..self.clone()
        })
    }
}

/// Cluster-level weighted means and assignment summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterFrame {
    pub cluster_ids: Vec<String>,
    pub treated: Vec<bool>,
    /// w_j, the summed individual weights.
    pub weights: Vec<f64>,
    pub ybar: Vec<f64>,
    /// Cluster covariate means, row-major m × v.
    pub xbar: Vec<f64>,
    pub covariate_names: Vec<String>,
    /// Position of each covariate in the originating [`StudyFrame`].
    pub covariate_index: Vec<usize>,
    pub m: usize,
    pub m1: usize,
    pub m0: usize,
    pub ybar_grand: f64,
    pub xbar_grand: Vec<f64>,
    pub p_star: f64,
    pub wbar: f64,
    pub wbar1: f64,
    pub wbar0: f64,
}

impl ClusterFrame {
    /// Builds the frame from per-cluster rows, computing grand means and arm
    /// summaries. An arm may be empty (leave-one-out folds); its mean weight is
    /// then reported as 0.
    pub fn from_rows(
        cluster_ids: Vec<String>,
        treated: Vec<bool>,
        weights: Vec<f64>,
        ybar: Vec<f64>,
        xbar: Vec<f64>,
        covariate_names: Vec<String>,
        covariate_index: Vec<usize>,
    ) -> Self {
        let m = weights.len();
        let v = covariate_names.len();
        debug_assert_eq!(xbar.len(), m * v);
        let total: f64 = weights.iter().sum();
        let mut wy = 0.0;
        let mut wx = vec![0.0; v];
        let mut w1 = 0.0;
        let mut m1 = 0;
        for j in 0..m {
            let wj = weights[j];
            wy += wj * ybar[j];
            for q in 0..v {
                wx[q] += wj * xbar[j * v + q];
            }
            if treated[j] {
                w1 += wj;
                m1 += 1;
            }
        }
        let m0 = m - m1;
        let w0 = total - w1;
        Self {
            cluster_ids,
            treated,
            weights,
            ybar,
            xbar,
            covariate_names,
            covariate_index,
            m,
            m1,
            m0,
            ybar_grand: wy / total,
            xbar_grand: wx.into_iter().map(|s| s / total).collect(),
            p_star: w1 / total,
            wbar: total / m as f64,
            wbar1: if m1 > 0 { w1 / m1 as f64 } else { 0.0 },
            wbar0: if m0 > 0 { w0 / m0 as f64 } else { 0.0 },
        }
    }

    pub fn v(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn xbar_row(&self, j: usize) -> &[f64] {
        let v = self.v();
        &self.xbar[j * v..(j + 1) * v]
    }

    /// Centered cluster covariate means x̄_j − x̄ for covariate `q`.
    pub fn centered_covariate(&self, q: usize) -> Vec<f64> {
        (0..self.m)
            .map(|j| self.xbar[j * self.v() + q] - self.xbar_grand[q])
            .collect()
    }

    /// Frame restricted to the given covariates (positions in this frame).
    pub fn select_covariates(&self, cols: &[usize]) -> Self {
        let v = self.v();
        let mut xbar = Vec::with_capacity(self.m * cols.len());
        for j in 0..self.m {
            xbar.extend(cols.iter().map(|&q| self.xbar[j * v + q]));
        }
        Self::from_rows(
            self.cluster_ids.clone(),
            self.treated.clone(),
            self.weights.clone(),
            self.ybar.clone(),
            xbar,
            cols.iter().map(|&q| self.covariate_names[q].clone()).collect(),
            cols.iter().map(|&q| self.covariate_index[q]).collect(),
        )
    }

    /// Frame with cluster `j` removed; summaries recomputed on the rest.
    pub fn without_cluster(&self, j: usize) -> Self {
        let v = self.v();
        let keep = |k: &usize| *k != j;
        let rows: Vec<usize> = (0..self.m).filter(keep).collect();
        Self::from_rows(
            rows.iter().map(|&k| self.cluster_ids[k].clone()).collect(),
            rows.iter().map(|&k| self.treated[k]).collect(),
            rows.iter().map(|&k| self.weights[k]).collect(),
            rows.iter().map(|&k| self.ybar[k]).collect(),
            rows.iter()
                .flat_map(|&k| self.xbar[k * v..(k + 1) * v].iter().copied())
                .collect(),
            self.covariate_names.clone(),
            self.covariate_index.clone(),
        )
    }
}

/// Weighted cluster means: ȳ_j = Σ_i w_ij y_ij / w_j with w_j = Σ_i w_ij, and
/// likewise for every covariate.
pub fn aggregate(frame: &StudyFrame) -> ClusterFrame {
    let m = frame.m();
    let v = frame.v();
    let mut wsum = vec![0.0; m];
    let mut ysum = vec![0.0; m];
    let mut xsum = vec![0.0; m * v];
    for i in 0..frame.n() {
        let j = frame.cluster_of[i];
        let wi = frame.w[i];
        wsum[j] += wi;
        ysum[j] += wi * frame.y[i];
        let row = frame.x_row(i);
        let acc = &mut xsum[j * v..(j + 1) * v];
        for q in 0..v {
            acc[q] += wi * row[q];
        }
    }
    let ybar = ysum.iter().zip(&wsum).map(|(s, w)| s / w).collect();
    let xbar = xsum
        .chunks(v.max(1))
        .zip(&wsum)
        .flat_map(|(row, w)| row.iter().map(move |s| s / w))
        .take(m * v)
        .collect();
    ClusterFrame::from_rows(
        frame.cluster_ids.clone(),
        frame.treated.clone(),
        wsum,
        ybar,
        xbar,
        frame.covariate_names.clone(),
        (0..v).collect(),
    )
}

/// Options for building the stage-1 design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StandardizeOptions {
    /// Scale covariates by the (w_j / w̄)-weighted SD; otherwise unweighted.
    pub weighted: bool,
    /// Also divide the centered outcome by its SD.
    pub standardize_outcome: bool,
}

impl Default for StandardizeOptions {
    fn default() -> Self {
        Self {
            weighted: true,
            standardize_outcome: false,
        }
    }
}

/// Centers outcomes and covariates at their w_j-weighted grand means and scales
/// covariates to unit SD (divisor m − 1). Column 0 of the design is T_j − p*.
pub fn center_and_standardize(
    cf: &ClusterFrame,
    opts: StandardizeOptions,
) -> Result<StandardizedDesign> {
    standardize(cf, opts, true)
}

fn spread(values: &[f64], rel: &[f64], m: usize) -> f64 {
    let ss: f64 = values.iter().zip(rel).map(|(x, a)| a * x * x).sum();
    (ss / (m as f64 - 1.0)).sqrt()
}

/// Non-strict mode gives zero-variance covariates a unit scale instead of
/// failing; their centered column is then identically zero.
pub(crate) fn standardize(
    cf: &ClusterFrame,
    opts: StandardizeOptions,
    strict: bool,
) -> Result<StandardizedDesign> {
    let m = cf.m;
    let v = cf.v();
    let rel: Vec<f64> = cf.weights.iter().map(|w| w / cf.wbar).collect();
    let sd_weights: Vec<f64> = if opts.weighted {
        rel.clone()
    } else {
        vec![1.0; m]
    };
    let mut z = DMatrix::zeros(m, v + 1);
    for j in 0..m {
        z[(j, 0)] = if cf.treated[j] { 1.0 } else { 0.0 } - cf.p_star;
    }
    let mut scales = Vec::with_capacity(v);
    for q in 0..v {
        let centered = cf.centered_covariate(q);
        let sd = spread(&centered, &sd_weights, m);
        let max_abs = (0..m)
            .map(|j| cf.xbar[j * v + q].abs())
            .fold(0.0_f64, f64::max);
        let scale = if !(sd > 1e-10 * max_abs) || sd == 0.0 {
            if strict {
                return Err(Error::ZeroVarianceCovariate {
                    index: cf.covariate_index[q],
                    name: cf.covariate_names[q].clone(),
                });
            }
            1.0
        } else {
            sd
        };
        for j in 0..m {
            z[(j, q + 1)] = centered[j] / scale;
        }
        scales.push(scale);
    }
    let centered_y: Vec<f64> = cf.ybar.iter().map(|y| y - cf.ybar_grand).collect();
    let y_scale = if opts.standardize_outcome {
        let sd = spread(&centered_y, &sd_weights, m);
        if sd > 0.0 {
            sd
        } else {
            1.0
        }
    } else {
        1.0
    };
    let ytilde = centered_y.iter().map(|y| y / y_scale).collect();
    let mut column_names = Vec::with_capacity(v + 1);
    column_names.push(TREATMENT_COLUMN.to_string());
    column_names.extend(cf.covariate_names.iter().cloned());
    Ok(StandardizedDesign {
        z,
        ytilde,
        row_weights: rel,
        scale_factors: scales,
        y_scale,
        column_names,
        penalty: vec![1.0; v + 1],
        frame: cf.clone(),
        options: opts,
    })
}

/// Column mapping for CSV input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub cluster: String,
    pub treatment: String,
    pub outcome: String,
    /// Weight column; unit weights are used when the header lacks it.
    pub weight: String,
    /// Covariate columns; all remaining columns when absent.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            cluster: "cluster".into(),
            treatment: "treatment".into(),
            outcome: "y".into(),
            weight: "w".into(),
            covariates: None,
        }
    }
}

pub fn load_study(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<StudyFrame> {
    let file = std::fs::File::open(path)?;
    read_study(file, schema)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Csv {
        line,
        message: e.to_string(),
    }
}

/// Reads a study from CSV with a header row. Treatment must be constant within
/// each cluster; rows of a cluster need not be contiguous.
pub fn read_study<R: Read>(reader: R, schema: &CsvSchema) -> Result<StudyFrame> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_cluster = find(&schema.cluster)?;
    let c_treat = find(&schema.treatment)?;
    let c_y = find(&schema.outcome)?;
    let c_w = find(&schema.weight).ok();
    let cov_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != c_cluster && *i != c_treat && *i != c_y && Some(*i) != c_w)
            .map(|(_, h)| h.trim().to_string())
            .collect(),
    };
    let c_cov: Vec<usize> = cov_names.iter().map(|n| find(n)).collect::<Result<_>>()?;

    let mut assignment: BTreeMap<String, bool> = BTreeMap::new();
    let mut records = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
        let field = |c: usize, name: &str| -> Result<f64> {
            rec.get(c)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Csv {
                    line,
                    message: format!("missing or non-numeric value in column `{name}`"),
                })
        };
        let cluster_id = rec.get(c_cluster).unwrap_or("").trim().to_string();
        if cluster_id.is_empty() {
            return Err(Error::Csv {
                line,
                message: format!("empty cluster id in column `{}`", schema.cluster),
            });
        }
        let t_raw = rec.get(c_treat).unwrap_or("").trim();
        let t = match t_raw.parse::<f64>() {
            Ok(x) if x == 1.0 => true,
            Ok(x) if x == 0.0 => false,
            _ => {
                return Err(Error::InvalidTreatment {
                    value: t_raw.to_string(),
                    line,
                })
            }
        };
        match assignment.get(&cluster_id) {
            Some(&prev) if prev != t => {
                return Err(Error::InconsistentTreatment {
                    cluster: cluster_id,
                    line,
                })
            }
            Some(_) => {}
            None => {
                assignment.insert(cluster_id.clone(), t);
            }
        }
        let y = field(c_y, &schema.outcome)?;
        let w = match c_w {
            Some(c) => field(c, &schema.weight)?,
            None => 1.0,
        };
        if w <= 0.0 {
            return Err(Error::Csv {
                line,
                message: format!("non-positive weight {w}"),
            });
        }
        let x = c_cov
            .iter()
            .zip(&cov_names)
            .map(|(&c, n)| field(c, n))
            .collect::<Result<Vec<_>>>()?;
        records.push(IndividualRecord { cluster_id, y, x, w });
    }
    StudyFrame::from_records(records, &assignment, cov_names)
}

/// Writes the frame in the layout [`read_study`] reads with the default schema.
/// Values use shortest round-trip formatting, so reading back is bit-exact.
pub fn write_study<W: Write>(frame: &StudyFrame, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let schema = CsvSchema::default();
    let mut header = vec![
        schema.cluster.clone(),
        schema.treatment.clone(),
        schema.outcome.clone(),
        schema.weight.clone(),
    ];
    header.extend(frame.covariate_names.iter().cloned());
    wtr.write_record(&header).map_err(csv_error)?;
    let mut fields: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..frame.n() {
        fields.clear();
        let j = frame.cluster_of[i];
        fields.push(frame.cluster_ids[j].clone());
        fields.push(if frame.treated[j] { "1" } else { "0" }.to_string());
        fields.push(frame.y[i].to_string());
        fields.push(frame.w[i].to_string());
        fields.extend(frame.x_row(i).iter().map(|x| x.to_string()));
        wtr.write_record(&fields).map_err(csv_error)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_study(frame: &StudyFrame, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_study(frame, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rec(c: &str, y: f64, x: Vec<f64>, w: f64) -> IndividualRecord {
        IndividualRecord {
            cluster_id: c.into(),
            y,
            x,
            w,
        }
    }

    fn assign(pairs: &[(&str, bool)]) -> BTreeMap<String, bool> {
        pairs.iter().map(|(c, t)| (c.to_string(), *t)).collect()
    }

    #[test]
    fn minimal_csv() {
        let csv = "cluster,treatment,y\na,1,1\na,1,2\nb,0,3\nb,0,4\n";
        let f = read_study(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(f.m(), 2);
        assert_eq!(f.v(), 0);
        assert_eq!(f.n(), 4);
        assert_eq!(f.w(), &[1.0; 4]);
    }

    #[test]
    fn inconsistent_treatment_rejected() {
        let csv = "cluster,treatment,y\na,1,1\na,0,2\nb,0,3\n";
        let err = read_study(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, Error::InconsistentTreatment { ref cluster, line: 3 } if cluster == "a"));
        assert!(err.to_string().contains("inconsistent treatment within cluster"));
    }

    #[test]
    fn malformed_value_reports_line() {
        let csv = "cluster,treatment,y,x1\na,1,1,0.5\nb,0,,1.0\n";
        match read_study(csv.as_bytes(), &CsvSchema::default()).unwrap_err() {
            Error::Csv { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_arm_rejected() {
        let csv = "cluster,treatment,y\na,1,1\nb,1,3\n";
        assert!(matches!(
            read_study(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::EmptyArm("control"))
        ));
    }

    #[test]
    fn non_contiguous_clusters_merge() {
        let csv = "cluster,treatment,y\na,1,1\nb,0,3\na,1,5\n";
        let f = read_study(csv.as_bytes(), &CsvSchema::default()).unwrap();
        let cf = aggregate(&f);
        assert_eq!(cf.ybar, vec![3.0, 3.0]);
        assert_eq!(cf.weights, vec![2.0, 1.0]);
    }

    #[test]
    fn one_cluster_mean() {
        let f = StudyFrame::from_records(
            vec![
                rec("a", 2.0, vec![], 1.0),
                rec("a", 4.0, vec![], 1.0),
                rec("b", 0.0, vec![], 1.0),
            ],
            &assign(&[("a", true), ("b", false)]),
            vec![],
        )
        .unwrap();
        let cf = aggregate(&f);
        assert_eq!(cf.ybar[0], 3.0);
        assert_eq!(cf.weights[0], 2.0);
    }

    #[test]
    fn p_star_from_cluster_weights() {
        let f = StudyFrame::from_records(
            vec![rec("a", 1.0, vec![], 3.0), rec("b", 0.0, vec![], 1.0)],
            &assign(&[("a", true), ("b", false)]),
            vec![],
        )
        .unwrap();
        assert_eq!(aggregate(&f).p_star, 0.75);
    }

    #[test]
    fn average_cluster_weighting() {
        // w_ij = 1/n_j gives every cluster weight 1
        let sizes = [2usize, 3, 5, 4];
        let mut records = Vec::new();
        let mut naive = Vec::new();
        for (j, &n) in sizes.iter().enumerate() {
            let mut sum = 0.0;
            for i in 0..n {
                let y = (j * 7 + i * 3) as f64 * 0.1;
                sum += y;
                records.push(rec(&format!("c{j}"), y, vec![], 1.0 / n as f64));
            }
            naive.push(sum / n as f64);
        }
        let f = StudyFrame::from_records(
            records,
            &assign(&[("c0", true), ("c1", false), ("c2", true), ("c3", false)]),
            vec![],
        )
        .unwrap();
        let cf = aggregate(&f);
        for j in 0..4 {
            assert_abs_diff_eq!(cf.weights[j], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(cf.ybar[j], naive[j], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(cf.p_star, 0.5, epsilon = 1e-12);
    }

    fn five_cluster_frame() -> ClusterFrame {
        ClusterFrame::from_rows(
            (0..5).map(|j| format!("c{j}")).collect(),
            vec![true, false, true, false, true],
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            vec![0.3, -1.2, 2.5, 0.7, 1.1],
            vec![1.0, 10.0, 2.0, 13.0, 4.0, 9.5, 3.0, 11.0, 7.0, 12.5],
            vec!["a".into(), "b".into()],
            vec![0, 1],
        )
    }

    #[test]
    fn standardized_moments_recomputed_naively() {
        let cf = five_cluster_frame();
        let d = center_and_standardize(&cf, StandardizeOptions::default()).unwrap();
        let wsum: f64 = cf.weights.iter().sum();
        let wbar = wsum / 5.0;
        for q in 1..3 {
            let mut mean = 0.0;
            for j in 0..5 {
                mean += cf.weights[j] / wbar * d.z[(j, q)];
            }
            mean /= 5.0;
            let mut var = 0.0;
            for j in 0..5 {
                var += cf.weights[j] / wbar * (d.z[(j, q)] - mean).powi(2);
            }
            var /= 4.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
        }
        // scale factors invert back to centered values
        for j in 0..5 {
            for q in 0..2 {
                let back = d.z[(j, q + 1)] * d.scale_factors[q];
                assert_abs_diff_eq!(back, cf.xbar[j * 2 + q] - cf.xbar_grand[q], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn centering_identity() {
        let cf = five_cluster_frame();
        let d = center_and_standardize(&cf, StandardizeOptions::default()).unwrap();
        for q in 0..3 {
            let s: f64 = (0..5).map(|j| cf.weights[j] * d.z[(j, q)]).sum();
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-10);
        }
        let sy: f64 = (0..5).map(|j| cf.weights[j] * d.ytilde[j]).sum();
        assert_abs_diff_eq!(sy, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_variance_covariate() {
        let mut cf = five_cluster_frame();
        for j in 0..5 {
            cf.xbar[j * 2 + 1] = 3.25;
        }
        let cf = ClusterFrame::from_rows(
            cf.cluster_ids,
            cf.treated,
            cf.weights,
            cf.ybar,
            cf.xbar,
            cf.covariate_names,
            cf.covariate_index,
        );
        match center_and_standardize(&cf, StandardizeOptions::default()) {
            Err(Error::ZeroVarianceCovariate { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn standardization_is_idempotent() {
        let cf = five_cluster_frame();
        let d = center_and_standardize(&cf, StandardizeOptions::default()).unwrap();
        let mut xbar = Vec::new();
        for j in 0..5 {
            xbar.push(d.z[(j, 1)]);
            xbar.push(d.z[(j, 2)]);
        }
        let again = ClusterFrame::from_rows(
            cf.cluster_ids.clone(),
            cf.treated.clone(),
            cf.weights.clone(),
            cf.ybar.clone(),
            xbar,
            cf.covariate_names.clone(),
            cf.covariate_index.clone(),
        );
        let d2 = center_and_standardize(&again, StandardizeOptions::default()).unwrap();
        for s in d2.scale_factors {
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let f = StudyFrame::from_records(
            vec![
                rec("a", 0.1 + 0.2, vec![1.0 / 3.0, -2.5e-17], 1.5),
                rec("b", -7.25, vec![f64::MAX / 3.0, 1e-300], 0.2),
                rec("a", 3.0, vec![0.0, 2.0], 1.0),
            ],
            &assign(&[("a", true), ("b", false)]),
            vec!["x1".into(), "x2".into()],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_study(&f, &mut buf).unwrap();
        let back = read_study(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back, f);
    }
}
