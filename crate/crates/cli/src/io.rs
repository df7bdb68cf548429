//! CSV cohorts and atomic file output.
//!
//! Schema: header `patient_id,time_index,x_0,...,x_{d-1},y`, one row per
//! observation. `time_index` is a non-negative integer, strictly increasing
//! within a patient. Empty cells are missing values.

use std::collections::HashMap;
use std::path::Path;

use dmegp_core::PatientSeries;

use crate::error::{CliError, Result};

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// A loaded series together with its time indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedSeries {
    pub series: PatientSeries,
    pub time_index: Vec<u64>,
}

fn parse_cell(cell: &str) -> std::result::Result<f64, String> {
    if cell.trim().is_empty() {
        return Ok(f64::NAN);
    }
    cell.trim().parse().map_err(|_| format!("`{cell}` is not a number"))
}

/// Loads a cohort, keeping patients in order of first appearance.
pub fn load_timed_csv(path: &Path) -> Result<Vec<TimedSeries>> {
    read_timed(path, false)
}

/// Loads query rows; the `y` column may be empty and is ignored.
pub fn load_query_csv(path: &Path) -> Result<Vec<TimedSeries>> {
    read_timed(path, true)
}

fn read_timed(path: &Path, ignore_targets: bool) -> Result<Vec<TimedSeries>> {
    let malformed = |line: u64, reason: String| CliError::MalformedRow { path: path.to_path_buf(), line, reason };
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    let n = header.len();
    let valid = n >= 3
        && &header[0] == "patient_id"
        && &header[1] == "time_index"
        && &header[n - 1] == "y"
        && (2..n - 1).all(|j| header[j] == format!("x_{}", j - 2));
    if !valid {
        return Err(malformed(1, "header must be patient_id,time_index,x_0..x_{d-1},y".into()));
    }
    let d = n - 3;

    // id, inputs, targets, time indices
    type Rows = (String, Vec<Vec<f64>>, Vec<f64>, Vec<u64>);
    let mut out: Vec<Rows> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[0].trim();
        if id.is_empty() {
            return Err(malformed(line, "empty patient_id".into()));
        }
        let t: u64 = record[1].trim().parse().map_err(|_| malformed(line, format!("bad time_index `{}`", &record[1])))?;
        let x = (0..d).map(|j| parse_cell(&record[2 + j])).collect::<std::result::Result<Vec<_>, _>>();
        let x = x.map_err(|r| malformed(line, r))?;
        let y = parse_cell(&record[n - 1]).map_err(|r| malformed(line, r))?;
        let y = if ignore_targets { 0.0 } else { y };
        let slot = *index.entry(id.to_string()).or_insert_with(|| {
            out.push((id.to_string(), Vec::new(), Vec::new(), Vec::new()));
            out.len() - 1
        });
        let entry = &mut out[slot];
        if entry.3.last().is_some_and(|last| *last >= t) {
            return Err(CliError::NonMonotonicTime { path: path.to_path_buf(), patient: id.to_string(), line });
        }
        entry.1.push(x);
        entry.2.push(y);
        entry.3.push(t);
    }
    out.into_iter()
        .map(|(id, xs, ys, ts)| {
            let series = PatientSeries::with_missing(id, xs, ys)?;
            Ok(TimedSeries { series, time_index: ts })
        })
        .collect()
}

pub fn load_csv(path: &Path) -> Result<Vec<PatientSeries>> {
    Ok(load_timed_csv(path)?.into_iter().map(|t| t.series).collect())
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Serializes a cohort with `time_index` equal to the step position.
pub fn cohort_csv(cohort: &[PatientSeries], input_dim: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["patient_id".to_string(), "time_index".to_string()];
    header.extend((0..input_dim).map(|j| format!("x_{j}")));
    header.push("y".into());
    w.write_record(&header).map_err(|e| CliError::Data(e.to_string()))?;
    for s in cohort {
        for (t, (x, y)) in s.inputs.iter().zip(&s.targets).enumerate() {
            if x.len() != input_dim {
                return Err(CliError::Data(format!("patient `{}` has {} features, expected {input_dim}", s.id, x.len())));
            }
            let mut row = vec![s.id.clone(), t.to_string()];
            row.extend(x.iter().map(|v| cell(*v)));
            row.push(cell(*y));
            w.write_record(&row).map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

pub fn save_csv(path: &Path, cohort: &[PatientSeries], input_dim: usize) -> Result<()> {
    write_atomic(path, &cohort_csv(cohort, input_dim)?)
}

/// Writes rows of already formatted cells under `header`.
pub fn save_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Data(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Formats a float for CSV output; NaN becomes an empty cell.
pub fn fmt(v: f64) -> String {
    cell(v)
}
