//! Stage CSV files and the JSON summary.
//!
//! Numbers are written with 17 significant digits so every `f64` round-trips.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use qmem_core::closedloop::ClosedLoopSolution;
use qmem_core::control::ControlSolution;
use qmem_core::filtering::FilterSolution;
use qmem_core::montecarlo::CrossMomentReport;
use serde::Serialize;

pub fn format_number(x: f64) -> String {
    format!("{x:.16e}")
}

/// `prefix_i_j` for every entry of a `rows×cols` matrix, row-major.
fn matrix_columns(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| format!("{prefix}_{i}_{j}")))
        .collect()
}

fn vector_columns(prefix: &str, len: usize) -> Vec<String> {
    (0..len).map(|i| format!("{prefix}_{i}")).collect()
}

fn push_matrix(row: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            row.push(m[(i, j)]);
        }
    }
}

fn numbers(row: Vec<f64>) -> Vec<String> {
    row.into_iter().map(format_number).collect()
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// `t, P1_*, P2_*, P3_*, K_*`.
pub fn write_filter_csv(path: &Path, filter: &FilterSolution) -> Result<()> {
    let first = filter.blocks.first();
    let n = first.first.nrows();
    let (k_rows, k_cols) = filter.gain.first().shape();
    let mut header = vec!["t".to_string()];
    for name in ["P1", "P2", "P3"] {
        header.extend(matrix_columns(name, n, n));
    }
    header.extend(matrix_columns("K", k_rows, k_cols));
    let rows = filter.blocks.values.iter().enumerate().map(|(i, b)| {
        let mut row = vec![filter.blocks.time(i)];
        push_matrix(&mut row, &b.first);
        push_matrix(&mut row, &b.cross);
        push_matrix(&mut row, &b.last);
        push_matrix(&mut row, &filter.gain.values[i]);
        numbers(row)
    });
    write_csv(path, &header, rows)
}

/// `t, Q1_*, Q2_*, Q3_*, c_*`; `Q2` is the lower-left block.
pub fn write_control_csv(path: &Path, control: &ControlSolution) -> Result<()> {
    let first = control.blocks.first();
    let n = first.first.nrows();
    let (c_rows, c_cols) = control.gain.first().shape();
    let mut header = vec!["t".to_string()];
    for name in ["Q1", "Q2", "Q3"] {
        header.extend(matrix_columns(name, n, n));
    }
    header.extend(matrix_columns("c", c_rows, c_cols));
    let rows = control.blocks.values.iter().enumerate().map(|(i, b)| {
        let mut row = vec![control.blocks.time(i)];
        push_matrix(&mut row, &b.first);
        push_matrix(&mut row, &b.cross);
        push_matrix(&mut row, &b.last);
        push_matrix(&mut row, &control.gain.values[i]);
        numbers(row)
    });
    write_csv(path, &header, rows)
}

/// `t, Delta, Phi, H_pont, effort, H_balance, mean_*, u_mean_*, T_*`.
pub fn write_closed_loop_csv(path: &Path, cl: &ClosedLoopSolution) -> Result<()> {
    let n2 = cl.second_moment.first().nrows();
    let d = cl.actuator_mean.first().map_or(0, |u| u.len());
    let mut header: Vec<String> = ["t", "Delta", "Phi", "H_pont", "effort", "H_balance"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(vector_columns("mean", n2));
    header.extend(vector_columns("u_mean", d));
    header.extend(matrix_columns("T", n2, n2));
    let rows = (0..cl.second_moment.values.len()).map(|i| {
        let mut row = vec![
            cl.second_moment.time(i),
            cl.deviation[i],
            cl.running_cost[i],
            cl.hamiltonian[i],
            cl.effort[i],
            cl.hamiltonian_balance[i],
        ];
        row.extend(cl.mean.values[i].iter());
        row.extend(cl.actuator_mean[i].iter());
        push_matrix(&mut row, &cl.second_moment.values[i]);
        numbers(row)
    });
    write_csv(path, &header, rows)
}

/// One row per checkpoint: `node, t, cross_max, cross_sigma, error_mean_max,
/// error_mean_sigma, error_covariance_rel, controller_moment_rel`.
pub fn write_montecarlo_csv(path: &Path, report: &CrossMomentReport) -> Result<()> {
    let header: Vec<String> = [
        "node",
        "t",
        "cross_max",
        "cross_sigma",
        "error_mean_max",
        "error_mean_sigma",
        "error_covariance_rel",
        "controller_moment_rel",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = report.checkpoints.iter().map(|cp| {
        let mut row = vec![cp.node.to_string()];
        row.extend(numbers(vec![
            cp.time,
            cp.cross_max,
            cp.cross_sigma,
            cp.error_mean_max,
            cp.error_mean_sigma,
            cp.error_covariance_rel,
            cp.controller_moment_rel,
        ]));
        row
    });
    write_csv(path, &header, rows)
}

pub fn write_summary<T: Serialize>(path: &Path, summary: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(format_number(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(format_number(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn column_names_row_major() {
        assert_eq!(matrix_columns("P1", 2, 2), ["P1_0_0", "P1_0_1", "P1_1_0", "P1_1_1"]);
        let mut row = vec![];
        push_matrix(&mut row, &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(row, [1.0, 2.0, 3.0, 4.0]);
    }
}
