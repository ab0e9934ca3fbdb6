//! Delimited-text dataset loading (comma-separated, header row, UTF-8).

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    Real,
    /// Stored as f64 but validated to be integral.
    Int,
}

/// Named numeric columns of equal length, in deterministic (schema) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    columns: Vec<(String, Vec<f64>)>,
    rows: usize,
}

impl Dataset {
    pub fn new(name: &str, columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let rows = columns.first().map(|(_, v)| v.len()).unwrap_or(0);
        for (cname, v) in &columns {
            if v.len() != rows {
                return Err(Error::Data(format!(
                    "column '{cname}' has {} rows, expected {rows}",
                    v.len()
                )));
            }
        }
        Ok(Dataset { name: name.into(), columns, rows })
    }

    pub fn empty(name: &str) -> Self {
        Dataset { name: name.into(), columns: Vec::new(), rows: 0 }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Data(format!("dataset '{}' has no column '{name}'", self.name)))
    }

    pub fn column_as_usize(&self, name: &str) -> Result<Vec<usize>> {
        self.column(name)?
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && v >= 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Data(format!("column '{name}' value {v} is not a non-negative integer")))
                }
            })
            .collect()
    }
}

/// Parse delimited text against a schema. Column order in the result follows
/// the schema, rows keep file order.
pub fn parse_dataset(name: &str, text: &str, schema: &[(&str, ColumnType)]) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Data(format!("{name}: no rows")))?;
    let headers: Vec<&str> = header.split(',').map(|h| h.trim()).collect();

    let mut spec_to_file = Vec::with_capacity(schema.len());
    for (want, _) in schema {
        let idx = headers
            .iter()
            .position(|h| h == want)
            .ok_or_else(|| Error::Data(format!("{name}: missing column '{want}'")))?;
        spec_to_file.push(idx);
    }

    let mut columns: Vec<(String, Vec<f64>)> =
        schema.iter().map(|(n, _)| (n.to_string(), Vec::new())).collect();
    let mut row_no = 0usize;
    for line in lines {
        row_no += 1;
        let cells: Vec<&str> = line.split(',').map(|c| c.trim()).collect();
        for (k, ((cname, ctype), &file_idx)) in schema.iter().zip(&spec_to_file).enumerate() {
            let cell = cells.get(file_idx).ok_or_else(|| {
                Error::Data(format!("{name}: row {row_no} has no column '{cname}'"))
            })?;
            let value: f64 = cell.parse().map_err(|_| {
                Error::Data(format!("{name}: row {row_no}, column '{cname}': cannot parse '{cell}'"))
            })?;
            if *ctype == ColumnType::Int && value.fract() != 0.0 {
                return Err(Error::Data(format!(
                    "{name}: row {row_no}, column '{cname}': '{cell}' is not an integer"
                )));
            }
            columns[k].1.push(value);
        }
    }
    if row_no == 0 {
        return Err(Error::Data(format!("{name}: no rows")));
    }
    Dataset::new(name, columns)
}

/// Load a dataset file against a schema.
pub fn load_dataset(path: &Path, schema: &[(&str, ColumnType)]) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    parse_dataset(name, &text, schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_simple_file() {
        let d = parse_dataset(
            "t",
            "y,sigma\n28,15\n8,10\n",
            &[("y", ColumnType::Real), ("sigma", ColumnType::Real)],
        )
        .unwrap();
        assert_eq!(d.rows(), 2);
        assert_eq!(d.column("y").unwrap(), &[28.0, 8.0]);
    }

    #[test]
    fn empty_file_errors() {
        let err = parse_dataset("t", "", &[("y", ColumnType::Real)]).unwrap_err();
        assert!(err.to_string().contains("no rows"));
        let err = parse_dataset("t", "y\n", &[("y", ColumnType::Real)]).unwrap_err();
        assert!(err.to_string().contains("no rows"));
    }

    #[test]
    fn missing_column_named() {
        let err = parse_dataset("t", "y\n1\n", &[("sigma", ColumnType::Real)]).unwrap_err();
        assert!(err.to_string().contains("'sigma'"));
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let err = parse_dataset("t", "y\n1\nfoo\n", &[("y", ColumnType::Real)]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("'y'"), "{msg}");
    }

    #[test]
    fn int_column_validated() {
        let err = parse_dataset("t", "n\n1.5\n", &[("n", ColumnType::Int)]).unwrap_err();
        assert!(err.to_string().contains("not an integer"));
    }
}
