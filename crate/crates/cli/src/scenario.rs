//! Scenario files: a JSON object with matrices as row-major nested arrays.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use qmem_core::model::ScenarioSpec;
use serde::Deserialize;
use thiserror::Error;

/// Grid density used when a scenario omits `steps`.
pub const STEPS_PER_UNIT_TIME: f64 = 2000.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("missing field `{0}`")]
    MissingField(&'static str),

    #[error("dimension error in field `{field}`: {message}")]
    Dimension { field: &'static str, message: String },
}

/// A matrix either as rows or as one flat row-major list.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MatrixInput {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    n: usize,
    m: usize,
    #[serde(rename = "R")]
    energy: Option<MatrixInput>,
    #[serde(rename = "M")]
    field_coupling: Option<MatrixInput>,
    #[serde(rename = "N")]
    control_coupling: Option<MatrixInput>,
    #[serde(rename = "D")]
    measurement: Option<MatrixInput>,
    #[serde(rename = "F")]
    selector: Option<MatrixInput>,
    #[serde(rename = "Pi")]
    control_penalty: Option<MatrixInput>,
    mean0: Option<Vec<f64>>,
    cov0: Option<MatrixInput>,
    tau: Option<f64>,
    steps: Option<usize>,
}

fn dim_error(field: &'static str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Dimension {
        field,
        message: message.into(),
    }
}

/// Matrix with a known number of columns; the row count is taken from the
/// input (or must equal `rows` when given).
fn to_matrix(
    field: &'static str,
    input: &MatrixInput,
    rows: Option<usize>,
    cols: usize,
) -> Result<DMatrix<f64>, ScenarioError> {
    let mat = match input {
        MatrixInput::Rows(data) => {
            if let Some(bad) = data.iter().position(|row| row.len() != cols) {
                return Err(dim_error(
                    field,
                    format!("row {bad} has {} entries, expected {cols}", data[bad].len()),
                ));
            }
            let flat: Vec<f64> = data.iter().flatten().copied().collect();
            DMatrix::from_row_slice(data.len(), cols, &flat)
        }
        MatrixInput::Flat(data) => {
            let rows = rows.unwrap_or(data.len().checked_div(cols).unwrap_or(0));
            if data.len() != rows * cols {
                return Err(dim_error(
                    field,
                    format!("expected {rows}×{cols} ({} numbers), got {} numbers", rows * cols, data.len()),
                ));
            }
            DMatrix::from_row_slice(rows, cols, data)
        }
    };
    if let Some(rows) = rows {
        if mat.nrows() != rows {
            return Err(dim_error(field, format!("expected {rows} rows, got {}", mat.nrows())));
        }
    }
    Ok(mat)
}

fn required<'a>(field: &'static str, input: &'a Option<MatrixInput>) -> Result<&'a MatrixInput, ScenarioError> {
    input.as_ref().ok_or(ScenarioError::MissingField(field))
}

/// Parses a scenario document and applies defaults: `steps = ⌈2000·τ⌉`,
/// `mean0 = 0`, `cov0 = ½I`, no actuator when `N` is absent.
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let raw: RawScenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let (n, m) = (raw.n, raw.m);

    let energy = to_matrix("R", required("R", &raw.energy)?, Some(n), n)?;
    let field_coupling = to_matrix("M", required("M", &raw.field_coupling)?, Some(m), n)?;
    let measurement = to_matrix("D", required("D", &raw.measurement)?, None, m)?;
    let selector = to_matrix("F", required("F", &raw.selector)?, None, n)?;
    let control_coupling = match &raw.control_coupling {
        Some(input) => to_matrix("N", input, None, n)?,
        None => DMatrix::zeros(0, n),
    };
    let d = control_coupling.nrows();
    let control_penalty = match &raw.control_penalty {
        Some(input) => to_matrix("Pi", input, Some(d), d)?,
        None if d == 0 => DMatrix::zeros(0, 0),
        None => return Err(ScenarioError::MissingField("Pi")),
    };
    let mean0 = match raw.mean0 {
        Some(v) if v.len() != n => return Err(dim_error("mean0", format!("expected {n} numbers, got {}", v.len()))),
        Some(v) => DVector::from_vec(v),
        None => DVector::zeros(n),
    };
    let cov0 = match &raw.cov0 {
        Some(input) => to_matrix("cov0", input, Some(n), n)?,
        None => DMatrix::identity(n, n) * 0.5,
    };
    let horizon = raw.tau.ok_or(ScenarioError::MissingField("tau"))?;
    let steps = raw
        .steps
        .unwrap_or_else(|| (STEPS_PER_UNIT_TIME * horizon).ceil().max(1.0) as usize);

    Ok(ScenarioSpec {
        n,
        m,
        d,
        r: measurement.nrows(),
        s: selector.nrows(),
        energy,
        field_coupling,
        control_coupling,
        measurement,
        selector,
        control_penalty,
        mean0,
        cov0,
        horizon,
        steps,
    })
}

pub fn load_scenario(path: &Path) -> Result<ScenarioSpec, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_scenario(&text)
}
