//! CSV ingestion of bivariate count data.
//!
//! Two layouts are accepted, both with a header row:
//! - pairs: `n1,n2[,weight]`, one observation (or one weighted cell) per row;
//! - frequency table: header `label,v1,v2,...` with the `n2` values, then one
//!   row per `n1` value holding the counts.

use std::fs::File;
use std::path::Path;

use cdph_core::{CountDataset, Shift};

use crate::error::{CliError, CliResult};

fn open(path: &Path) -> CliResult<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.position() {
        Some(pos) => CliError::data(path, format!("line {}: {e}", pos.line())),
        None => CliError::data(path, e.to_string()),
    }
}

fn parse_value(path: &Path, line: u64, field: &str, what: &str) -> CliResult<f64> {
    let x: f64 = field.parse().map_err(|_| {
        CliError::data(
            path,
            format!("line {line}: {what} '{field}' is not a number"),
        )
    })?;
    if !x.is_finite() {
        return Err(CliError::data(
            path,
            format!("line {line}: {what} '{field}' is not finite"),
        ));
    }
    Ok(x)
}

fn parse_count(path: &Path, line: u64, field: &str, what: &str) -> CliResult<u64> {
    if field.is_empty() {
        return Ok(0);
    }
    field.parse().map_err(|_| {
        CliError::data(
            path,
            format!("line {line}: {what} '{field}' is not a non-negative integer"),
        )
    })
}

fn to_taus(path: &Path, line: u64, shift: &Shift, x1: f64, x2: f64) -> CliResult<(u64, u64)> {
    let tau = |x, coord| {
        shift
            .to_tau(x, coord)
            .map_err(|e| CliError::data(path, format!("line {line}: {e}")))
    };
    Ok((tau(x1, 1)?, tau(x2, 2)?))
}

fn finish(path: &Path, rows: Vec<(u64, u64, u64)>, shift: Shift) -> CliResult<CountDataset> {
    if rows.iter().all(|r| r.2 == 0) {
        return Err(CliError::data(path, "no observations"));
    }
    CountDataset::from_tau_counts(rows, shift).map_err(|e| CliError::data(path, e.to_string()))
}

/// Reads `n1,n2[,weight]` rows on the observed lattice of `shift`.
pub fn read_pairs(path: &Path, shift: Shift) -> CliResult<CountDataset> {
    let mut reader = open(path)?;
    let width = reader.headers().map_err(|e| csv_error(path, e))?.len();
    if width != 2 && width != 3 {
        return Err(CliError::data(
            path,
            format!("line 1: expected header n1,n2[,weight], found {width} columns"),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = line_of(&record);
        if record.len() != width {
            return Err(CliError::data(
                path,
                format!(
                    "line {line}: expected {width} fields, found {}",
                    record.len()
                ),
            ));
        }
        let x1 = parse_value(path, line, &record[0], "n1")?;
        let x2 = parse_value(path, line, &record[1], "n2")?;
        let weight = if width == 3 {
            parse_count(path, line, &record[2], "weight")?
        } else {
            1
        };
        let (t1, t2) = to_taus(path, line, &shift, x1, x2)?;
        rows.push((t1, t2, weight));
    }
    finish(path, rows, shift)
}

/// Reads a two-way frequency table: `n1` down the first column, `n2`
/// across the header.
pub fn read_table(path: &Path, shift: Shift) -> CliResult<CountDataset> {
    let mut reader = open(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 2 {
        return Err(CliError::data(
            path,
            "line 1: table header needs at least one n2 column",
        ));
    }
    let columns = header
        .iter()
        .skip(1)
        .map(|f| parse_value(path, 1, f, "n2"))
        .collect::<CliResult<Vec<_>>>()?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = line_of(&record);
        if record.len() != header.len() {
            return Err(CliError::data(
                path,
                format!(
                    "line {line}: expected {} fields, found {}",
                    header.len(),
                    record.len()
                ),
            ));
        }
        let x1 = parse_value(path, line, &record[0], "n1")?;
        for (field, &x2) in record.iter().skip(1).zip(&columns) {
            let count = parse_count(path, line, field, "count")?;
            if count > 0 {
                let (t1, t2) = to_taus(path, line, &shift, x1, x2)?;
                rows.push((t1, t2, count));
            }
        }
    }
    finish(path, rows, shift)
}
