//! JSON and CSV output helpers shared by the pipeline stages.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde_json::Value;

use crate::error::{Error, Result};

/// Round to 12 significant digits; non-finite values become `null`.
pub fn round12(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

pub fn number(x: f64) -> Value {
    if x.is_finite() {
        Value::from(round12(x))
    } else {
        Value::Null
    }
}

pub fn complex_json(z: &Complex64) -> Value {
    Value::Array(vec![number(z.re), number(z.im)])
}

pub fn vector_json(v: &DVector<f64>) -> Value {
    Value::Array(v.iter().map(|x| number(*x)).collect())
}

pub fn slice_json(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| number(*x)).collect())
}

/// Row-major nested arrays.
pub fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| Value::Array((0..m.ncols()).map(|j| number(m[(i, j)])).collect()))
            .collect(),
    )
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Plain numeric CSV, one matrix row per line, full precision.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut text = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        text += &row.join(",");
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), lineno + 1), e.to_string()))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(
                    format!("{}:{}", path.display(), lineno + 1),
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Per-cell table with a header: `x1..xd` cell centers followed by named columns.
pub fn write_cell_table(
    path: &Path,
    centers: &[Vec<f64>],
    names: &[String],
    columns: &[Vec<f64>],
) -> Result<()> {
    let dim = centers.first().map_or(0, |c| c.len());
    let mut header: Vec<String> = (1..=dim).map(|d| format!("x{d}")).collect();
    header.extend(names.iter().cloned());
    let mut text = header.join(",") + "\n";
    for (p, c) in centers.iter().enumerate() {
        let mut row: Vec<String> = c.iter().map(|v| format!("{v}")).collect();
        row.extend(columns.iter().map(|col| format!("{}", col[p])));
        text += &(row.join(",") + "\n");
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_keeps_twelve_digits() {
        assert_eq!(round12(0.1 + 0.2), 0.3);
        assert_eq!(round12(1.0 / 3.0), 0.333333333333);
        assert_eq!(round12(-123456.7890123456), -123456.789012);
        assert_eq!(number(f64::INFINITY), Value::Null);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 1e-17, 0.1 + 0.2, 4.0, 5.0]);
        let path = dir.path().join("m.csv");
        write_matrix_csv(&path, &m).unwrap();
        assert_eq!(read_matrix_csv(&path).unwrap(), m);
    }
}
