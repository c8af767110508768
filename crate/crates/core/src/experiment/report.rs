use std::path::{Path, PathBuf};

use super::RunError;

/// The columns `report` needs from every metrics file.
pub const REPORT_FIELDS: &[&str] = &["scenario", "accuracy", "time_total", "energy_total"];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub file: PathBuf,
    pub scenario: String,
    pub accuracy: Option<f64>,
    pub time_total: f64,
    pub energy_total: f64,
}

/// How much smaller `ours` is than `theirs`, in percent of `theirs`.
pub fn reduction_percent(ours: f64, theirs: f64) -> f64 {
    if theirs == 0.0 {
        return 0.0;
    }
    100.0 * (theirs - ours) / theirs
}

/// Reads the report columns from a metrics file. Extra columns are fine; a
/// missing one is a schema error that names it.
pub fn read_report_rows(path: &Path) -> Result<Vec<ReportRow>, RunError> {
    let schema = |m: String| RunError::Schema(format!("{}: {m}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| schema(e.to_string()))?.clone();
    let mut index = Vec::new();
    for field in REPORT_FIELDS {
        let i = headers
            .iter()
            .position(|h| h.trim() == *field)
            .ok_or_else(|| schema(format!("missing field `{field}`")))?;
        index.push(i);
    }
    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record.map_err(|e| schema(e.to_string()))?;
        let cell = |k: usize| record.get(index[k]).unwrap_or("").trim().to_string();
        let number = |k: usize| -> Result<Option<f64>, RunError> {
            let raw = cell(k);
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse()
                .map(Some)
                .map_err(|_| schema(format!("row {}: field `{}` is not a number: {raw:?}", n + 1, REPORT_FIELDS[k])))
        };
        let required = |k: usize| -> Result<f64, RunError> {
            number(k)?.ok_or_else(|| schema(format!("row {}: field `{}` is empty", n + 1, REPORT_FIELDS[k])))
        };
        rows.push(ReportRow {
            file: path.to_path_buf(),
            scenario: cell(0),
            accuracy: number(1)?,
            time_total: required(2)?,
            energy_total: required(3)?,
        });
    }
    if rows.is_empty() {
        return Err(schema("no data rows".into()));
    }
    Ok(rows)
}

/// Comparison table; reductions are of the first row against each other row.
pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = format!(
        "{:<28} {:<10} {:>9} {:>14} {:>16}\n",
        "file", "scenario", "accuracy", "time [s]", "energy [J]"
    );
    for r in rows {
        let acc = r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<28} {:<10} {:>9} {:>14.4} {:>16.4}\n",
            r.file.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            r.scenario,
            acc,
            r.time_total,
            r.energy_total
        ));
    }
    if let Some((first, rest)) = rows.split_first() {
        for r in rest {
            out.push_str(&format!(
                "{} vs {}: time reduced by {:.1}%, energy reduced by {:.1}%\n",
                first.scenario,
                r.scenario,
                reduction_percent(first.time_total, r.time_total),
                reduction_percent(first.energy_total, r.energy_total)
            ));
        }
    }
    out
}

pub fn report_files(paths: &[PathBuf]) -> Result<String, RunError> {
    if paths.is_empty() {
        return Err(RunError::Config("report needs at least one metrics file".into()));
    }
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_report_rows(p)?);
    }
    Ok(render_report(&rows))
}
