//! Delimited-file ingestion with the complete-case / mean-imputation
//! missing-data conventions, plus CSV and Markdown serialization of
//! estimate and metric outputs.

use std::collections::HashSet;
use std::path::Path;

use crate::clanova::pairwise_sum;
use crate::data::{ClusterRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::simkit::MetricsTable;
use crate::variance::EstimateReport;

/// Maps file columns onto the trial schema.
#[derive(Debug, Clone)]
pub struct SchemaMap {
    pub cluster_col: String,
    pub treatment_col: String,
    pub outcome_col: String,
    pub covariate_cols: Vec<String>,
    pub stratum_col: Option<String>,
    pub delimiter: u8,
    pub na_tokens: HashSet<String>,
}

impl SchemaMap {
    pub fn new(
        cluster_col: impl Into<String>,
        treatment_col: impl Into<String>,
        outcome_col: impl Into<String>,
        covariate_cols: Vec<String>,
    ) -> Self {
        Self {
            cluster_col: cluster_col.into(),
            treatment_col: treatment_col.into(),
            outcome_col: outcome_col.into(),
            covariate_cols,
            stratum_col: None,
            delimiter: b',',
            na_tokens: ["", "NA", "."].iter().map(|s| s.to_string()).collect(),
        }
    }

    fn is_na(&self, field: &str) -> bool {
        self.na_tokens.contains(field.trim())
    }
}

/// What ingestion did to the raw file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    /// Individuals dropped for a missing outcome.
    pub dropped_rows: usize,
    /// Covariate cells replaced by the pooled column mean.
    pub imputed_cells: usize,
    /// Clusters removed because outcome-dropping emptied them.
    pub removed_clusters: usize,
}

struct RawRow {
    cluster: String,
    treatment: u8,
    outcome: Option<f64>,
    covariates: Vec<Option<f64>>,
    stratum: Option<String>,
}

fn column_index(header: &csv::StringRecord, name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Config(format!("column '{name}' not found in header")))
}

fn parse_field<T: std::str::FromStr>(field: &str, line: u64, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {what} from '{field}'"),
    })
}

/// Reads a long-format delimited file (one row per individual) into a
/// [`TrialDataset`].
///
/// Rows with a missing outcome are dropped; missing covariate entries are
/// imputed once by the pooled (both arms, all clusters) mean of that
/// column's non-missing values among retained rows; clusters left empty
/// by outcome-dropping are removed.
pub fn read_trial(path: impl AsRef<Path>, schema: &SchemaMap) -> Result<(TrialDataset, IngestReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(csv_error)?;

    let header = reader.headers().map_err(csv_error)?.clone();
    let ci = column_index(&header, &schema.cluster_col)?;
    let ti = column_index(&header, &schema.treatment_col)?;
    let oi = column_index(&header, &schema.outcome_col)?;
    let xi: Vec<usize> = schema
        .covariate_cols
        .iter()
        .map(|c| column_index(&header, c))
        .collect::<Result<_>>()?;
    let si = schema.stratum_col.as_deref().map(|c| column_index(&header, c)).transpose()?;
    let p = xi.len();

    let mut report = IngestReport::default();
    let mut rows: Vec<RawRow> = Vec::new();
    let mut cluster_seen: Vec<String> = Vec::new();

    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |pos| pos.line());
        let get = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or(Error::Parse { line, message: "row too short".into() })
        };

        let cluster = get(ci)?.trim().to_string();
        let t_field = get(ti)?;
        let treatment: u8 = parse_field(t_field, line, "treatment")?;
        if treatment > 1 {
            return Err(Error::Parse {
                line,
                message: format!("treatment must be 0 or 1, got '{t_field}'"),
            });
        }
        let o_field = get(oi)?;
        let outcome = if schema.is_na(o_field) {
            None
        } else {
            Some(parse_field(o_field, line, "outcome")?)
        };
        let covariates = xi
            .iter()
            .map(|&idx| {
                let f = get(idx)?;
                if schema.is_na(f) {
                    Ok(None)
                } else {
                    parse_field(f, line, "covariate").map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let stratum = si.map(|idx| get(idx).map(|s| s.trim().to_string())).transpose()?;

        if outcome.is_none() {
            report.dropped_rows += 1;
            // still record the cluster so an all-missing cluster counts
            // as removed rather than never ingested
            if !cluster_seen.contains(&cluster) {
                cluster_seen.push(cluster);
            }
            continue;
        }
        if !cluster_seen.contains(&cluster) {
            cluster_seen.push(cluster.clone());
        }
        rows.push(RawRow { cluster, treatment, outcome, covariates, stratum });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }

    // pooled per-column means over retained, non-missing values
    let col_means: Vec<f64> = (0..p)
        .map(|k| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.covariates[k]).collect();
            if vals.is_empty() {
                return Err(Error::Invalid(format!(
                    "covariate '{}' has no non-missing values",
                    schema.covariate_cols[k]
                )));
            }
            Ok(pairwise_sum(&vals) / vals.len() as f64)
        })
        .collect::<Result<_>>()?;

    let mut clusters = Vec::new();
    for id in &cluster_seen {
        let members: Vec<&RawRow> = rows.iter().filter(|r| &r.cluster == id).collect();
        if members.is_empty() {
            report.removed_clusters += 1;
            continue;
        }
        let treatment = members[0].treatment;
        if members.iter().any(|r| r.treatment != treatment) {
            return Err(Error::InconsistentTreatment { cluster: id.clone() });
        }
        let stratum = members[0].stratum.clone();
        let outcomes: Vec<f64> = members.iter().map(|r| r.outcome.unwrap()).collect();
        let mut covariates = Vec::with_capacity(members.len() * p);
        for r in &members {
            for k in 0..p {
                covariates.push(r.covariates[k].unwrap_or_else(|| {
                    report.imputed_cells += 1;
                    col_means[k]
                }));
            }
        }
        clusters.push(ClusterRecord::new(id, treatment, outcomes, covariates, p, stratum)?);
    }

    let dataset = TrialDataset::new(clusters, schema.covariate_cols.clone())?;
    Ok((dataset, report))
}

fn csv_error(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Parse { line: 0, message: e.to_string() },
        _ => Error::Parse {
            line: e.position().map_or(0, |pos| pos.line()),
            message: e.to_string(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Renders `x` with 6 significant digits in plain decimal notation.
pub fn format_sig6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0.00000".into();
    }
    let mut exp = x.abs().log10().floor() as i32;
    // rounding to 6 significant digits can bump the exponent (9.999996 → 10)
    let scale = 10f64.powi(5 - exp);
    let rounded = (x * scale).round() / scale;
    if rounded.abs().log10().floor() as i32 != exp {
        exp += 1;
    }
    let decimals = (5 - exp).max(0) as usize;
    format!("{rounded:.decimals$}")
}

/// Anything that can be laid out as a header row plus data rows.
pub trait Tabular {
    fn header(&self) -> Vec<String>;
    fn data_rows(&self) -> Vec<Vec<String>>;
}

impl Tabular for EstimateReport {
    fn header(&self) -> Vec<String> {
        ["estimator", "estimate", "se", "ci_low", "ci_high", "level"]
            .map(String::from)
            .to_vec()
    }

    fn data_rows(&self) -> Vec<Vec<String>> {
        vec![vec![
            self.estimator_label.clone(),
            format_sig6(self.delta_hat),
            format_sig6(self.se),
            format_sig6(self.ci_low),
            format_sig6(self.ci_high),
            format_sig6(self.level),
        ]]
    }
}

impl Tabular for MetricsTable {
    fn header(&self) -> Vec<String> {
        [
            "estimator",
            "bias",
            "emp_se",
            "ase",
            "cp",
            "re",
            "mcse_bias",
            "mcse_emp_se",
            "mcse_cp",
            "mcse_re",
            "n_converged",
            "n_reps",
        ]
        .map(String::from)
        .to_vec()
    }

    fn data_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    format_sig6(r.bias),
                    format_sig6(r.emp_se),
                    format_sig6(r.ase),
                    format_sig6(r.cp),
                    format_sig6(r.re),
                    format_sig6(r.mcse_bias),
                    format_sig6(r.mcse_emp_se),
                    format_sig6(r.mcse_cp),
                    format_sig6(r.mcse_re),
                    r.n_converged.to_string(),
                    r.n_reps.to_string(),
                ]
            })
            .collect()
    }
}

/// Renders a table to a string in the requested format. CSV output is
/// RFC-4180 quoted; Markdown is column-aligned.
pub fn render_report(report: &dyn Tabular, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer.write_record(report.header()).expect("in-memory write");
            for row in report.data_rows() {
                writer.write_record(row).expect("in-memory write");
            }
            String::from_utf8(writer.into_inner().expect("in-memory flush"))
                .expect("csv output is UTF-8")
        }
        ReportFormat::Markdown => {
            let header = report.header();
            let rows = report.data_rows();
            let mut widths: Vec<usize> = header.iter().map(String::len).collect();
            for row in &rows {
                for (w, cell) in widths.iter_mut().zip(row) {
                    *w = (*w).max(cell.len());
                }
            }
            let mut out = String::new();
            let emit = |out: &mut String, cells: &[String]| {
                out.push('|');
                for (cell, w) in cells.iter().zip(&widths) {
                    out.push_str(&format!(" {cell:<w$} |"));
                }
                out.push('\n');
            };
            emit(&mut out, &header);
            out.push('|');
            for w in &widths {
                out.push_str(&format!("{}|", "-".repeat(w + 2)));
            }
            out.push('\n');
            for row in &rows {
                emit(&mut out, row);
            }
            out
        }
    }
}

/// Writes a table to `destination`; output is byte-identical for
/// identical inputs.
pub fn write_report(
    report: &dyn Tabular,
    format: ReportFormat,
    destination: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(destination, render_report(report, format))?;
    Ok(())
}
