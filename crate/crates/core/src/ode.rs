//! Fixed-step classical RK4 for matrix-valued ODEs on a uniform grid.
//!
//! Backward problems (terminal data at `t1`) are solved by the time reversal
//! `s = t1 - t`, which turns them into forward problems with a negated
//! right-hand side. Grids are always stored in ascending time.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A state that the integrator can advance: a vector space with an optional
/// symmetrization post-step.
pub trait OdeState: Clone {
    /// `self += alpha * other`.
    fn add_scaled(&mut self, alpha: f64, other: &Self);

    /// Replaces every block that must be symmetric by its symmetric part.
    fn symmetrize(&mut self);

    fn is_finite(&self) -> bool;
}

impl OdeState for DMatrix<f64> {
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }

    fn symmetrize(&mut self) {
        let k = self.nrows();
        for i in 0..k {
            for j in (i + 1)..k {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

/// Three `n×n` blocks `(first, cross, last)` of a symmetric `2n×2n` matrix,
/// integrated as one state. Only `first` and `last` are symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTriple {
    pub first: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub last: DMatrix<f64>,
}

impl OdeState for BlockTriple {
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        self.first.add_scaled(alpha, &other.first);
        self.cross.add_scaled(alpha, &other.cross);
        self.last.add_scaled(alpha, &other.last);
    }

    fn symmetrize(&mut self) {
        self.first.symmetrize();
        self.last.symmetrize();
    }

    fn is_finite(&self) -> bool {
        self.first.is_finite() && self.cross.is_finite() && self.last.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Initial data at `t0`.
    Forward,
    /// Terminal data at `t1`.
    Backward,
}

/// Values of a state on the uniform grid `t0, t0 + h, …, t1`, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<S = DMatrix<f64>> {
    pub t0: f64,
    pub t1: f64,
    pub values: Vec<S>,
}

impl<S> TimeGrid<S> {
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn step_size(&self) -> f64 {
        (self.t1 - self.t0) / self.steps() as f64
    }

    /// Time of node `i`. The last node is exactly `t1`.
    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps() {
            self.t1
        } else {
            self.t0 + i as f64 * self.step_size()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.time(i)).collect()
    }

    pub fn first(&self) -> &S {
        &self.values[0]
    }

    pub fn last(&self) -> &S {
        &self.values[self.values.len() - 1]
    }

    /// Whether `other` has the same nodes.
    pub fn same_nodes<T>(&self, other: &TimeGrid<T>) -> bool {
        self.t0 == other.t0 && self.t1 == other.t1 && self.values.len() == other.values.len()
    }

    pub fn map<T>(&self, f: impl FnMut(&S) -> T) -> TimeGrid<T> {
        TimeGrid {
            t0: self.t0,
            t1: self.t1,
            values: self.values.iter().map(f).collect(),
        }
    }

    /// Index of the node at time `t`, if `t` is a node within round-off.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        if t < self.t0 || t > self.t1 {
            return None;
        }
        let mut x = (t - self.t0) / self.step_size();
        // Node times themselves must hit their node exactly.
        if (x - x.round()).abs() < 1e-9 {
            x = x.round();
        }
        let i = x.round();
        ((x - i).abs() <= 1e-9).then_some(i as usize)
    }

    /// Bracketing node and linear weight of `t`: value = (1-w)·v[i] + w·v[i+1].
    pub(crate) fn locate(&self, t: f64) -> Result<(usize, f64)> {
        // Stage times computed as start + k·h may overshoot an endpoint by round-off.
        let slack = 1e-9 * (self.t1 - self.t0).abs() / self.steps().max(1) as f64;
        let t = if t < self.t0 && t >= self.t0 - slack {
            self.t0
        } else if t > self.t1 && t <= self.t1 + slack {
            self.t1
        } else {
            t
        };
        if !(t >= self.t0 && t <= self.t1) {
            return Err(Error::OutOfRange {
                t,
                t0: self.t0,
                t1: self.t1,
            });
        }
        let steps = self.steps();
        if steps == 0 {
            return Ok((0, 0.0));
        }
        let mut x = (t - self.t0) / self.step_size();
        // Node times themselves must hit their node exactly.
        if (x - x.round()).abs() < 1e-9 {
            x = x.round();
        }
        let i = (x.floor() as usize).min(steps - 1);
        let w = (x - i as f64).clamp(0.0, 1.0);
        Ok((i, w))
    }
}

/// Linear interpolation between the nodes bracketing `t`; exact at nodes.
pub fn sample_grid<S: OdeState>(grid: &TimeGrid<S>, t: f64) -> Result<S> {
    let (i, w) = grid.locate(t)?;
    if w == 0.0 {
        return Ok(grid.values[i].clone());
    }
    if w == 1.0 {
        return Ok(grid.values[i + 1].clone());
    }
    let mut diff = grid.values[i + 1].clone();
    diff.add_scaled(-1.0, &grid.values[i]);
    let mut out = grid.values[i].clone();
    out.add_scaled(w, &diff);
    Ok(out)
}

/// Integrates `ẏ = rhs(t, y)` with classical RK4 over `steps` uniform steps.
///
/// `init` is the value at `t0` for [`Direction::Forward`] and at `t1` for
/// [`Direction::Backward`]; that node is stored exactly as given. With
/// `symmetrize` set, every accepted state is replaced by its symmetric part.
pub fn integrate_matrix_ode<S, F>(
    rhs: F,
    init: S,
    t0: f64,
    t1: f64,
    steps: usize,
    direction: Direction,
    symmetrize: bool,
) -> Result<TimeGrid<S>>
where
    S: OdeState,
    F: Fn(f64, &S) -> S,
{
    if steps == 0 {
        return Err(Error::Parameter("integration needs at least one step".into()));
    }
    if !(t1 > t0) {
        return Err(Error::Parameter(format!("empty time interval [{t0}, {t1}]")));
    }
    // Time reversal s = t1 - t with a negated right-hand side is RK4 with a
    // negative step taken from the terminal time.
    let (start, dt) = match direction {
        Direction::Forward => (t0, (t1 - t0) / steps as f64),
        Direction::Backward => (t1, -(t1 - t0) / steps as f64),
    };
    let time_of = |k: usize, frac: f64| start + (k as f64 + frac) * dt;

    let mut values = Vec::with_capacity(steps + 1);
    values.push(init.clone());
    let mut y = init;
    for k in 0..steps {
        let k1 = rhs(time_of(k, 0.0), &y);
        let mut y2 = y.clone();
        y2.add_scaled(0.5 * dt, &k1);
        let k2 = rhs(time_of(k, 0.5), &y2);
        let mut y3 = y.clone();
        y3.add_scaled(0.5 * dt, &k2);
        let k3 = rhs(time_of(k, 0.5), &y3);
        let mut y4 = y.clone();
        y4.add_scaled(dt, &k3);
        let k4 = rhs(time_of(k, 1.0), &y4);

        y.add_scaled(dt / 6.0, &k1);
        y.add_scaled(dt / 3.0, &k2);
        y.add_scaled(dt / 3.0, &k3);
        y.add_scaled(dt / 6.0, &k4);
        if symmetrize {
            y.symmetrize();
        }
        if !y.is_finite() {
            return Err(Error::Divergence {
                step: k + 1,
                time: time_of(k + 1, 0.0),
            });
        }
        values.push(y.clone());
    }
    if direction == Direction::Backward {
        values.reverse();
    }
    Ok(TimeGrid { t0, t1, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn zero_rhs_keeps_identity() {
        let grid = integrate_matrix_ode(
            |_, y: &DMatrix<f64>| DMatrix::zeros(y.nrows(), y.ncols()),
            DMatrix::identity(3, 3),
            0.0,
            1.0,
            10,
            Direction::Forward,
            false,
        )
        .unwrap();
        assert_eq!(grid.values.len(), 11);
        assert!(grid.values.iter().all(|v| *v == DMatrix::identity(3, 3)));
    }

    #[test]
    fn exponential_growth_reaches_e() {
        let grid = integrate_matrix_ode(
            |_, y: &DMatrix<f64>| y.clone(),
            scalar(1.0),
            0.0,
            1.0,
            100,
            Direction::Forward,
            false,
        )
        .unwrap();
        assert!((grid.last()[(0, 0)] - std::f64::consts::E).abs() < 1e-8);
    }

    #[test]
    fn backward_constant_solution_is_terminal_value() {
        let lambda = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let grid = integrate_matrix_ode(
            |_, y: &DMatrix<f64>| DMatrix::zeros(y.nrows(), y.ncols()),
            lambda.clone(),
            0.0,
            2.0,
            7,
            Direction::Backward,
            true,
        )
        .unwrap();
        assert!(grid.values.iter().all(|v| *v == lambda));
    }

    #[test]
    fn backward_solve_matches_closed_form() {
        // ẏ = -y with y(1) = 1 has y(t) = e^{1-t}.
        let grid = integrate_matrix_ode(
            |_, y: &DMatrix<f64>| -y,
            scalar(1.0),
            0.0,
            1.0,
            200,
            Direction::Backward,
            false,
        )
        .unwrap();
        assert_eq!(grid.last()[(0, 0)], 1.0);
        assert!((grid.first()[(0, 0)] - std::f64::consts::E).abs() < 1e-10);
        assert!((grid.values[100][(0, 0)] - 0.5_f64.exp()).abs() < 1e-10);
    }

    #[test]
    fn time_dependent_rhs_uses_stage_times() {
        // ẏ = 3t² integrates exactly under RK4 (Simpson on a quadratic).
        let grid = integrate_matrix_ode(
            |t, _: &DMatrix<f64>| scalar(3.0 * t * t),
            scalar(0.0),
            0.0,
            2.0,
            4,
            Direction::Forward,
            false,
        )
        .unwrap();
        assert!((grid.last()[(0, 0)] - 8.0).abs() < 1e-13);
    }

    #[test]
    fn divergence_reports_step() {
        let err = integrate_matrix_ode(
            |_, y: &DMatrix<f64>| y.map(|v| v * v * 1e200),
            scalar(1e100),
            0.0,
            1.0,
            10,
            Direction::Forward,
            false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }));
    }

    #[test]
    fn sampling_is_exact_at_nodes_and_linear_between() {
        let grid = TimeGrid {
            t0: 0.0,
            t1: 1.0,
            values: (0..=10).map(|i| scalar(i as f64 / 10.0)).collect(),
        };
        assert_eq!(sample_grid(&grid, grid.time(3)).unwrap(), grid.values[3]);
        assert_eq!(sample_grid(&grid, 1.0).unwrap(), grid.values[10]);
        assert!((sample_grid(&grid, 0.35).unwrap()[(0, 0)] - 0.35).abs() < 1e-15);
        assert!(matches!(sample_grid(&grid, 1.5), Err(Error::OutOfRange { .. })));
        assert!(matches!(sample_grid(&grid, -0.1), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn sampling_constant_grid() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let grid = TimeGrid {
            t0: -1.0,
            t1: 3.0,
            values: vec![c.clone(); 9],
        };
        for t in [-1.0, -0.3, 0.77, 2.99, 3.0] {
            assert_eq!(sample_grid(&grid, t).unwrap(), c);
        }
    }

    #[test]
    fn invalid_intervals_rejected() {
        let rhs = |_: f64, y: &DMatrix<f64>| y.clone();
        assert!(integrate_matrix_ode(rhs, scalar(1.0), 0.0, 1.0, 0, Direction::Forward, false).is_err());
        assert!(integrate_matrix_ode(rhs, scalar(1.0), 1.0, 1.0, 5, Direction::Forward, false).is_err());
    }

    #[test]
    fn block_triple_symmetrizes_only_diagonal_blocks() {
        let skew = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 3.0, 0.0]);
        let mut b = BlockTriple {
            first: skew.clone(),
            cross: skew.clone(),
            last: skew.clone(),
        };
        b.symmetrize();
        assert_eq!(b.first[(0, 1)], 2.0);
        assert_eq!(b.cross, skew);
        assert_eq!(b.last[(1, 0)], 2.0);
    }
}
