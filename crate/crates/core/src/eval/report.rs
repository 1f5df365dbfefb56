//! Method-by-model hit-rate tables and per-threshold sweep tables, as
//! Markdown (two decimals, for reading) or CSV (shortest round-trip floats,
//! for machines).

use serde::{Deserialize, Serialize};

use super::harness::EvalReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = ReportError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(ReportError::Format(other.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no reports to render")]
    Empty,
    #[error("reports mix IoU thresholds {0:?}; render one table per threshold")]
    MixedTau(Vec<f64>),
    #[error("sweep thresholds differ between rows")]
    MixedSweep,
    #[error("report for '{0}' has no sweep curve")]
    MissingSweep(String),
    #[error("unknown report format '{0}'")]
    Format(String),
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for ReportError {
    fn from(e: csv::Error) -> Self {
        ReportError::Csv(e.to_string())
    }
}

/// Rows are methods, columns are models (or datasets); cells are hit-rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Table {
    /// Rows and columns appear in first-seen order.
    pub fn from_reports(reports: &[EvalReport]) -> Result<(Self, f64), ReportError> {
        let first = reports.first().ok_or(ReportError::Empty)?;
        let mut taus: Vec<f64> = reports.iter().map(|r| r.tau).collect();
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        if taus.len() > 1 {
            return Err(ReportError::MixedTau(taus));
        }
        let mut columns: Vec<String> = Vec::new();
        for r in reports {
            if !columns.contains(&r.model) {
                columns.push(r.model.clone());
            }
        }
        let mut rows: Vec<(String, Vec<Option<f64>>)> = Vec::new();
        for r in reports {
            let ci = columns.iter().position(|c| *c == r.model).expect("column added above");
            let row = match rows.iter_mut().find(|(m, _)| *m == r.method) {
                Some(row) => row,
                None => {
                    rows.push((r.method.clone(), vec![None; columns.len()]));
                    rows.last_mut().expect("just pushed")
                }
            };
            row.1[ci] = Some(r.hit_rate);
        }
        Ok((Self { columns, rows }, first.tau))
    }

    pub fn cell(&self, method: &str, column: &str) -> Option<f64> {
        let ci = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|(m, _)| m == method)?.1[ci]
    }
}

fn md_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn csv_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub fn render_table(table: &Table, tau: f64, format: ReportFormat) -> Result<String, ReportError> {
    match format {
        ReportFormat::Markdown => {
            let mut s = format!("Mean hit-rate @ IoU = {tau}\n\n| Method |");
            for c in &table.columns {
                s.push_str(&format!(" {c} |"));
            }
            s.push_str("\n|---|");
            s.push_str(&"---:|".repeat(table.columns.len()));
            s.push('\n');
            for (m, vals) in &table.rows {
                s.push_str(&format!("| {m} |"));
                for v in vals {
                    s.push_str(&format!(" {} |", md_cell(*v)));
                }
                s.push('\n');
            }
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["method".to_string()];
            header.extend(table.columns.iter().cloned());
            w.write_record(&header)?;
            for (m, vals) in &table.rows {
                let mut rec = vec![m.clone()];
                rec.extend(vals.iter().map(|v| csv_cell(*v)));
                w.write_record(&rec)?;
            }
            let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Json => Ok(serde_json::to_string_pretty(&serde_json::json!({
            "tau": tau,
            "columns": table.columns,
            "rows": table.rows,
        }))
        .expect("table serializes")),
    }
}

pub fn render_report(reports: &[EvalReport], format: ReportFormat) -> Result<String, ReportError> {
    let (table, tau) = Table::from_reports(reports)?;
    render_table(&table, tau, format)
}

fn parse_cell(s: &str) -> Result<Option<f64>, ReportError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| ReportError::Csv(format!("cell '{s}': {e}")))
}

pub fn parse_csv_table(text: &str) -> Result<Table, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let method = rec.get(0).unwrap_or_default().to_string();
        let vals = rec.iter().skip(1).map(parse_cell).collect::<Result<Vec<_>, _>>()?;
        rows.push((method, vals));
    }
    Ok(Table { columns, rows })
}

/// Rows are methods, columns are IoU thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub thresholds: Vec<f64>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl SweepTable {
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self, ReportError> {
        let first = reports.first().ok_or(ReportError::Empty)?;
        let curve = first
            .sweep
            .as_ref()
            .ok_or_else(|| ReportError::MissingSweep(first.method.clone()))?;
        let thresholds = curve.thresholds().to_vec();
        let mut rows = Vec::new();
        for r in reports {
            let c = r
                .sweep
                .as_ref()
                .ok_or_else(|| ReportError::MissingSweep(r.method.clone()))?;
            if c.thresholds() != thresholds.as_slice() {
                return Err(ReportError::MixedSweep);
            }
            rows.push((r.method.clone(), c.hit_rates().to_vec()));
        }
        Ok(Self { thresholds, rows })
    }
}

pub fn render_sweep(table: &SweepTable, format: ReportFormat) -> Result<String, ReportError> {
    match format {
        ReportFormat::Markdown => {
            let mut s = String::from("| Method |");
            for t in &table.thresholds {
                s.push_str(&format!(" {t} |"));
            }
            s.push_str("\n|---|");
            s.push_str(&"---:|".repeat(table.thresholds.len()));
            s.push('\n');
            for (m, vals) in &table.rows {
                s.push_str(&format!("| {m} |"));
                for v in vals {
                    s.push_str(&format!(" {v:.2} |"));
                }
                s.push('\n');
            }
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["method".to_string()];
            header.extend(table.thresholds.iter().map(|t| format!("{t}")));
            w.write_record(&header)?;
            for (m, vals) in &table.rows {
                let mut rec = vec![m.clone()];
                rec.extend(vals.iter().map(|v| format!("{v}")));
                w.write_record(&rec)?;
            }
            let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Json => Ok(serde_json::to_string_pretty(table).expect("table serializes")),
    }
}

pub fn parse_sweep_csv(text: &str) -> Result<SweepTable, ReportError> {
    let t = parse_csv_table(text)?;
    let thresholds = t
        .columns
        .iter()
        .map(|c| parse_cell(c).map(|v| v.unwrap_or(f64::NAN)))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = t
        .rows
        .into_iter()
        .map(|(m, vals)| {
            vals.into_iter()
                .map(|v| v.ok_or_else(|| ReportError::Csv(format!("row '{m}' has an empty cell"))))
                .collect::<Result<Vec<_>, _>>()
                .map(|v| (m, v))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepTable { thresholds, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report(method: &str, model: &str, hr: f64, tau: f64) -> EvalReport {
        EvalReport {
            dataset: "public".into(),
            method: method.into(),
            model: model.into(),
            tau,
            matching_rule: "best-score".into(),
            hit_rate: hr,
            pooled_hit_rate: hr,
            per_class: BTreeMap::new(),
            map50: 0.0,
            map_skipped_classes: vec![],
            sweep: None,
            baseline: None,
            uplift: None,
            failed_images: vec![],
        }
    }

    #[test]
    fn single_report_one_row() {
        let md = render_report(&[report("Zero-Shot", "7B", 0.35, 0.5)], ReportFormat::Markdown)
            .unwrap();
        assert!(md.contains("| Zero-Shot | 0.35 |"));
        assert_eq!(md.lines().filter(|l| l.starts_with("| Zero")).count(), 1);
    }

    #[test]
    fn mixed_tau_rejected() {
        let r = render_report(
            &[report("a", "7B", 0.3, 0.5), report("b", "7B", 0.3, 0.6)],
            ReportFormat::Csv,
        );
        assert!(matches!(r, Err(ReportError::MixedTau(_))));
    }

    #[test]
    fn csv_round_trip_exact() {
        let reports = [
            report("Zero-Shot", "3B", 1.0 / 3.0, 0.5),
            report("Zero-Shot", "7B", 0.1 + 0.2, 0.5),
            report("ICL (5 shots)", "3B", 0.38, 0.5),
        ];
        let csv = render_report(&reports, ReportFormat::Csv).unwrap();
        let back = parse_csv_table(&csv).unwrap();
        let (want, _) = Table::from_reports(&reports).unwrap();
        assert_eq!(back, want);
        assert_eq!(back.cell("ICL (5 shots)", "7B"), None);
    }
}
