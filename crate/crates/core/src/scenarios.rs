//! Ready-made scenarios: the single-mode reference memory and random valid
//! multi-mode systems for property tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::model::ScenarioSpec;

/// Single-mode memory with one actuator and one homodyne-type observation:
/// `n = m = 2`, `R = M = F = I₂`, `N = [0, 1]`, `D = [1, 0]`, `Π = 1`,
/// `E X₀ = (1, 0)`, `Re cov(X₀) = ½I₂`, `τ = 5`, 10 000 steps.
pub fn reference() -> ScenarioSpec {
    ScenarioSpec {
        n: 2,
        m: 2,
        d: 1,
        r: 1,
        s: 2,
        energy: DMatrix::identity(2, 2),
        field_coupling: DMatrix::identity(2, 2),
        control_coupling: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        measurement: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        selector: DMatrix::identity(2, 2),
        control_penalty: DMatrix::identity(1, 1),
        mean0: DVector::from_vec(vec![1.0, 0.0]),
        cov0: DMatrix::identity(2, 2) * 0.5,
        horizon: 5.0,
        steps: 10_000,
    }
}

/// Same plant with the actuator removed (`d = 0`): the uncontrolled baseline.
pub fn uncontrolled(spec: &ScenarioSpec) -> ScenarioSpec {
    ScenarioSpec {
        d: 0,
        control_coupling: DMatrix::zeros(0, spec.n),
        control_penalty: DMatrix::zeros(0, 0),
        ..spec.clone()
    }
}

/// Random scenario that passes validation.
///
/// Observation rows are rotated quadratures of distinct field pairs, which
/// makes `DJDᵀ = 0` hold by construction; a random invertible mixing keeps
/// `D` full row rank.
pub fn random_valid<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> ScenarioSpec {
    let mut uniform = |rows: usize, cols: usize| {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    };
    let raw_energy = uniform(n, n);
    let energy = (&raw_energy + raw_energy.transpose()) * 0.5;
    let field_coupling = uniform(m, n);
    let d = 1 + (n / 2) % 2;
    let control_coupling = uniform(d, n);
    let r = 1 + (m / 2 - 1).min(1);
    let selector_raw = uniform(n, n);
    let s = n / 2;
    let selector = selector_raw.rows(0, s) + DMatrix::identity(s, n);
    let cov_factor = uniform(n, n);
    let cov0 = &cov_factor * cov_factor.transpose() * 0.5;
    let mean0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));

    let mut rotated = DMatrix::zeros(r, m);
    for k in 0..r {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        rotated[(k, 2 * k)] = angle.cos();
        rotated[(k, 2 * k + 1)] = angle.sin();
    }
    let mixing = DMatrix::identity(r, r) * 2.0
        + DMatrix::from_fn(r, r, |_, _| rng.random_range(-0.5..0.5));
    let measurement = mixing * rotated;

    let penalty_raw = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
    let control_penalty = &penalty_raw * penalty_raw.transpose() + DMatrix::identity(d, d);

    ScenarioSpec {
        n,
        m,
        d,
        r,
        s,
        energy,
        field_coupling,
        control_coupling,
        measurement,
        selector,
        control_penalty,
        mean0,
        cov0,
        horizon: 1.0,
        steps: 200,
    }
}
