#![allow(dead_code)]

use nalgebra::DMatrix;
use qmem_core::closedloop::{self, ClosedLoopSolution};
use qmem_core::control::{solve_control, ControlSolution};
use qmem_core::filtering::{solve_filter, FilterSolution};
use qmem_core::model::{derive_system_matrices, ControlPenalty, ScenarioSpec, SystemMatrices};

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = a.abs().row_sum().max();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = a / 2f64.powi(squarings as i32);
    let k = a.nrows();
    let mut term = DMatrix::identity(k, k);
    let mut sum = term.clone();
    for j in 1..=20 {
        term = &term * &scaled / j as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

pub struct Pipeline {
    pub spec: ScenarioSpec,
    pub sys: SystemMatrices,
    pub penalty: ControlPenalty,
    pub filter: FilterSolution,
    pub control: ControlSolution,
    pub closed_loop: ClosedLoopSolution,
}

pub fn run_pipeline(spec: ScenarioSpec) -> Pipeline {
    let sys = derive_system_matrices(&spec).unwrap();
    let penalty = ControlPenalty::new(spec.control_penalty.clone()).unwrap();
    let filter = solve_filter(&sys, &spec.cov0, spec.horizon, spec.steps).unwrap();
    let control = solve_control(&sys, &penalty, spec.horizon, spec.steps).unwrap();
    let closed_loop = closedloop::solve_closed_loop(&sys, &filter, &control, &penalty, &spec.mean0).unwrap();
    Pipeline { spec, sys, penalty, filter, control, closed_loop }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}
