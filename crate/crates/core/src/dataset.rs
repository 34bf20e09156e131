//! Observations `(Y, T, X)` and CSV ingestion.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentKind {
    Binary,
    Continuous,
}

/// Maps CSV header names onto the outcome, treatment and covariate roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub y: String,
    pub t: String,
    pub x: Vec<String>,
}

/// Immutable sample of `n` observations with `d` covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    t: Vec<f64>,
    x: Array2<f64>,
    treatment_kind: TreatmentKind,
    column_names: Vec<String>,
}

impl Dataset {
    /// Column names are `y`, `t`, then one per covariate.
    pub fn new(
        y: Vec<f64>,
        t: Vec<f64>,
        x: Array2<f64>,
        treatment_kind: TreatmentKind,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Validation("dataset must have at least one row".into()));
        }
        if t.len() != n || x.nrows() != n {
            return Err(Error::Shape(format!(
                "row counts disagree: y={}, t={}, x={}",
                n,
                t.len(),
                x.nrows()
            )));
        }
        if column_names.len() != x.ncols() + 2 {
            return Err(Error::Shape(format!(
                "expected {} column names, got {}",
                x.ncols() + 2,
                column_names.len()
            )));
        }
        for i in 0..n {
            if !y[i].is_finite() || !t[i].is_finite() || x.row(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::Ingestion {
                    row: i,
                    message: "non-finite value".into(),
                });
            }
            if treatment_kind == TreatmentKind::Binary && t[i] != 0.0 && t[i] != 1.0 {
                return Err(Error::Validation(format!(
                    "row {i}: binary treatment must be 0 or 1, found {}",
                    t[i]
                )));
            }
        }
        // Rows must be contiguous so that `row()` can hand out slices.
        let x = x.as_standard_layout().into_owned();
        Ok(Dataset {
            y,
            t,
            x,
            treatment_kind,
            column_names,
        })
    }

    /// Convenience constructor with generated names `x1..xd`.
    pub fn from_parts(y: Vec<f64>, t: Vec<f64>, x: Array2<f64>, kind: TreatmentKind) -> Result<Self> {
        let mut names = vec!["y".to_string(), "t".to_string()];
        names.extend((1..=x.ncols()).map(|j| format!("x{j}")));
        Dataset::new(y, t, x, kind, names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let d = self.x.ncols();
        // `x` is kept in standard layout by construction.
        &self.x.as_slice().expect("row-major covariates")[i * d..(i + 1) * d]
    }

    pub fn treatment_kind(&self) -> TreatmentKind {
        self.treatment_kind
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Covariate names (all columns after `y` and `t`).
    pub fn covariate_names(&self) -> &[String] {
        &self.column_names[2..]
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Argument("cannot take an empty subset".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::Argument(format!("row index {bad} out of range for n={}", self.n())));
        }
        Ok(Dataset {
            y: indices.iter().map(|&i| self.y[i]).collect(),
            t: indices.iter().map(|&i| self.t[i]).collect(),
            x: self.x.select(Axis(0), indices),
            treatment_kind: self.treatment_kind,
            column_names: self.column_names.clone(),
        })
    }

    /// Same covariates and treatment with a different outcome column.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Dataset> {
        Dataset::new(y, self.t.clone(), self.x.clone(), self.treatment_kind, self.column_names.clone())
    }

    /// Writes `y,t,x...` with a header row. Values use the shortest
    /// representation that parses back to the same double.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", self.column_names.join(",")).map_err(io)?;
        for i in 0..self.n() {
            write!(w, "{},{}", self.y[i], self.t[i]).map_err(io)?;
            for v in self.x_row(i) {
                write!(w, ",{v}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Reads a header-prefixed, comma-separated file and maps columns by name.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema, treatment_kind: TreatmentKind) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema, treatment_kind)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema, treatment_kind: TreatmentKind) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header row: {e}")))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let iy = find(&schema.y)?;
    let it = find(&schema.t)?;
    let ix: Vec<usize> = schema.x.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut y = Vec::new();
    let mut t = Vec::new();
    let mut xs = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Ingestion {
            row,
            message: e.to_string(),
        })?;
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).ok_or_else(|| Error::Ingestion {
                row,
                message: format!("missing field {col}"),
            })?;
            let v: f64 = raw.parse().map_err(|_| Error::Ingestion {
                row,
                message: format!("'{raw}' in column '{}' is not numeric", &headers[col]),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    row,
                    message: format!("non-finite value in column '{}'", &headers[col]),
                });
            }
            Ok(v)
        };
        y.push(cell(iy)?);
        t.push(cell(it)?);
        for &c in &ix {
            xs.push(cell(c)?);
        }
    }
    let n = y.len();
    let x = Array2::from_shape_vec((n, ix.len()), xs).map_err(|e| Error::Shape(e.to_string()))?;
    let mut names = vec![schema.y.clone(), schema.t.clone()];
    names.extend(schema.x.iter().cloned());
    Dataset::new(y, t, x, treatment_kind, names)
}

/// Column names from the header row of a CSV file.
pub fn read_header(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header row: {e}")))?;
    Ok(headers.iter().map(str::to_string).collect())
}

/// Reads a plain numeric matrix (header row required) from a CSV file, keeping
/// the named columns, or all columns when `columns` is empty.
pub fn load_matrix_csv(path: impl AsRef<Path>, columns: &[String]) -> Result<(Vec<String>, Array2<f64>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header row: {e}")))?
        .clone();
    let names: Vec<String> = if columns.is_empty() {
        headers.iter().map(str::to_string).collect()
    } else {
        columns.to_vec()
    };
    let idx: Vec<usize> = names
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::Schema(format!("missing column '{c}'")))
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::new();
    let mut n = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Ingestion {
            row,
            message: e.to_string(),
        })?;
        for &c in &idx {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::Ingestion {
                row,
                message: format!("'{raw}' is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    row,
                    message: "non-finite value".into(),
                });
            }
            data.push(v);
        }
        n += 1;
    }
    let x = Array2::from_shape_vec((n, idx.len()), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((names, x))
}
