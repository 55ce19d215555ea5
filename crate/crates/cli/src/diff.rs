use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDiff {
    pub rms: f64,
    pub max_abs: f64,
    /// Cells where exactly one side is NaN.
    pub nan_mismatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDiff {
    pub rows: usize,
    pub columns: BTreeMap<String, ColumnDiff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub files: BTreeMap<String, FileDiff>,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
}

impl DiffReport {
    /// Largest absolute difference over every compared cell.
    pub fn max_abs(&self) -> f64 {
        self.files
            .values()
            .flat_map(|f| f.columns.values())
            .map(|c| c.max_abs)
            .fold(0.0, f64::max)
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CliError::Incomparable(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = vec![];
    for (k, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| c.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Incomparable(format!("{} row {}: {e}", path.display(), k + 1)))?;
        if row.len() != header.len() {
            return Err(CliError::Incomparable(format!(
                "{} row {} has {} cells for {} columns",
                path.display(),
                k + 1,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

fn csv_names(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".csv") {
            names.insert(name);
        }
    }
    Ok(names)
}

fn diff_tables(name: &str, a: &Table, b: &Table) -> Result<FileDiff, CliError> {
    if a.header != b.header {
        return Err(CliError::Incomparable(format!("{name}: headers differ")));
    }
    if a.rows.len() != b.rows.len() {
        return Err(CliError::Incomparable(format!(
            "{name}: {} rows vs {} rows",
            a.rows.len(),
            b.rows.len()
        )));
    }
    let mut columns = BTreeMap::new();
    for (c, col) in a.header.iter().enumerate() {
        let (mut sq, mut max, mut n, mut nan) = (0.0, 0.0f64, 0usize, 0usize);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            let (x, y) = (ra[c], rb[c]);
            match (x.is_nan(), y.is_nan()) {
                (true, true) => {}
                (false, false) => {
                    let d = (x - y).abs();
                    sq += d * d;
                    max = max.max(d);
                    n += 1;
                }
                _ => nan += 1,
            }
        }
        columns.insert(
            col.clone(),
            ColumnDiff {
                rms: if n == 0 { 0.0 } else { (sq / n as f64).sqrt() },
                max_abs: max,
                nan_mismatches: nan,
            },
        );
    }
    Ok(FileDiff {
        rows: a.rows.len(),
        columns,
    })
}

/// Compares every CSV file present in both artifact directories.
pub fn diff_dirs(a: &Path, b: &Path) -> Result<DiffReport, CliError> {
    let na = csv_names(a)?;
    let nb = csv_names(b)?;
    let mut files = BTreeMap::new();
    for name in na.intersection(&nb) {
        let ta = read_table(&a.join(name))?;
        let tb = read_table(&b.join(name))?;
        files.insert(name.clone(), diff_tables(name, &ta, &tb)?);
    }
    Ok(DiffReport {
        files,
        only_in_a: na.difference(&nb).cloned().collect(),
        only_in_b: nb.difference(&na).cloned().collect(),
    })
}
