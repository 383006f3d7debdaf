//! Backward control Riccati equation and the optimal feedback gain.
//!
//! `Q` is partitioned as `[[Q1, Q2ᵀ], [Q2, Q3]]` (note `Q2` is the lower-left
//! block) with terminal value `Λ`, i.e. `Q1(τ) = Q3(τ) = Σ`, `Q2(τ) = -Σ`.
//! The actuator signal is `U = c x` with `c = -Π⁻¹ Eᵀ [Q2, Q3]`.

use log::warn;
use nalgebra::DMatrix;

use crate::error::Result;
use crate::filtering::{relative_grid_deviation, PSD_WARN_TOL};
use crate::linalg;
use crate::model::{ControlPenalty, SystemMatrices};
use crate::ode::{integrate_matrix_ode, BlockTriple, Direction, TimeGrid};

#[derive(Debug, Clone)]
pub struct ControlSolution {
    /// Full `2n×2n` solution, cross-check of `blocks`.
    pub full: TimeGrid,
    /// Authoritative blocks, stored as `first = Q1`, `cross = Q2`, `last = Q3`.
    pub blocks: TimeGrid<BlockTriple>,
    /// Feedback gain `c(t)` (d×2n).
    pub gain: TimeGrid,
    pub min_eigenvalue: f64,
}

impl ControlSolution {
    pub fn times(&self) -> Vec<f64> {
        self.blocks.times()
    }

    /// `[[Q1, Q2ᵀ], [Q2, Q3]]` at node `i`.
    pub fn assembled(&self, i: usize) -> DMatrix<f64> {
        assemble(&self.blocks.values[i])
    }

    pub fn assembled_grid(&self) -> TimeGrid {
        self.blocks.map(assemble)
    }

    pub fn block_full_deviation(&self) -> f64 {
        relative_grid_deviation(&self.full, &self.assembled_grid())
    }
}

fn assemble(q: &BlockTriple) -> DMatrix<f64> {
    linalg::block2(&q.first, &q.cross.transpose(), &q.cross, &q.last)
}

/// `E Π⁻¹ Eᵀ` (n×n).
fn actuation_weight(sys: &SystemMatrices, penalty: &ControlPenalty) -> DMatrix<f64> {
    &sys.actuator * penalty.inverse() * sys.actuator.transpose()
}

/// `Q sE Π⁻¹ sEᵀ Q - sAᵀ Q - Q sA`.
pub fn control_rhs_full(
    q: &DMatrix<f64>,
    sys: &SystemMatrices,
    penalty: &ControlPenalty,
) -> DMatrix<f64> {
    let se_q = sys.aug_actuator.transpose() * q;
    se_q.transpose() * penalty.inverse() * &se_q
        - sys.aug_drift.transpose() * q
        - q * &sys.aug_drift
}

/// Cascade form of [`control_rhs_full`]:
///
/// ```text
/// Q̇1 = Q2ᵀ E Π⁻¹ Eᵀ Q2
/// Q̇2 = (Q3 E Π⁻¹ Eᵀ - Aᵀ) Q2
/// Q̇3 = Q3 E Π⁻¹ Eᵀ Q3 - Aᵀ Q3 - Q3 A
/// ```
pub fn control_rhs_blocks(
    q: &BlockTriple,
    sys: &SystemMatrices,
    penalty: &ControlPenalty,
) -> BlockTriple {
    let w = actuation_weight(sys, penalty);
    let a = &sys.drift;
    let q3_w = &q.last * &w;
    BlockTriple {
        first: q.cross.transpose() * &w * &q.cross,
        cross: (&q3_w - a.transpose()) * &q.cross,
        last: &q3_w * &q.last - a.transpose() * &q.last - &q.last * a,
    }
}

/// `c = -Π⁻¹ Eᵀ [Q2, Q3]` (d×2n).
pub fn feedback_gain(
    q2: &DMatrix<f64>,
    q3: &DMatrix<f64>,
    sys: &SystemMatrices,
    penalty: &ControlPenalty,
) -> DMatrix<f64> {
    let lower_row = linalg::hstack(q2, q3);
    -(penalty.inverse() * sys.actuator.transpose() * lower_row)
}

/// Integrates the control Riccati equation backward from `Q(τ) = Λ` and
/// evaluates the feedback gain at every node.
pub fn solve_control(
    sys: &SystemMatrices,
    penalty: &ControlPenalty,
    horizon: f64,
    steps: usize,
) -> Result<ControlSolution> {
    let sigma = &sys.weight;
    let terminal = BlockTriple {
        first: sigma.clone(),
        cross: -sigma,
        last: sigma.clone(),
    };
    let blocks = integrate_matrix_ode(
        |_, q: &BlockTriple| control_rhs_blocks(q, sys, penalty),
        terminal,
        0.0,
        horizon,
        steps,
        Direction::Backward,
        true,
    )
    .map_err(|e| e.context("control Riccati (blocks)"))?;
    let full = integrate_matrix_ode(
        |_, q: &DMatrix<f64>| control_rhs_full(q, sys, penalty),
        sys.terminal_weight.clone(),
        0.0,
        horizon,
        steps,
        Direction::Backward,
        true,
    )
    .map_err(|e| e.context("control Riccati (full)"))?;
    let gain = blocks.map(|q| feedback_gain(&q.cross, &q.last, sys, penalty));

    let min_eigenvalue = blocks
        .values
        .iter()
        .map(|q| linalg::min_sym_eigenvalue(&assemble(q)))
        .fold(f64::INFINITY, f64::min);
    if min_eigenvalue < PSD_WARN_TOL {
        warn!("control Riccati solution lost positive semidefiniteness: λ_min = {min_eigenvalue:e}");
    }

    Ok(ControlSolution {
        full,
        blocks,
        gain,
        min_eigenvalue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::derive_system_matrices;
    use crate::scenarios;

    fn setup() -> (SystemMatrices, ControlPenalty) {
        let spec = scenarios::reference();
        (
            derive_system_matrices(&spec).unwrap(),
            ControlPenalty::new(spec.control_penalty).unwrap(),
        )
    }

    fn random_sym(k: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
        let raw = DMatrix::from_fn(k, k, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        });
        &raw + raw.transpose()
    }

    fn blocks_of(q: &DMatrix<f64>) -> BlockTriple {
        let (first, _, cross, last) = linalg::split_blocks(q);
        BlockTriple { first, cross, last }
    }

    #[test]
    fn zero_matrix_is_fixed_point() {
        let (sys, pen) = setup();
        assert_eq!(linalg::max_abs(&control_rhs_full(&DMatrix::zeros(4, 4), &sys, &pen)), 0.0);
    }

    #[test]
    fn block_rhs_matches_full_rhs() {
        let (sys, pen) = setup();
        for seed in 0..5 {
            let q = random_sym(4, seed);
            let full = control_rhs_full(&q, &sys, &pen);
            let assembled = assemble(&control_rhs_blocks(&blocks_of(&q), &sys, &pen));
            assert!(linalg::max_abs(&(full - assembled)) < 1e-13);
        }
    }

    #[test]
    fn decoupled_cross_block_freezes_q1_and_q2() {
        let (sys, pen) = setup();
        let q = BlockTriple {
            first: DMatrix::identity(2, 2),
            cross: DMatrix::zeros(2, 2),
            last: DMatrix::identity(2, 2),
        };
        let rhs = control_rhs_blocks(&q, &sys, &pen);
        assert_eq!(linalg::max_abs(&rhs.first), 0.0);
        assert_eq!(linalg::max_abs(&rhs.cross), 0.0);
    }

    #[test]
    fn without_actuator_cascade_is_linear() {
        let (mut sys, pen) = setup();
        sys.actuator.fill(0.0);
        sys.aug_actuator.fill(0.0);
        let q = blocks_of(&random_sym(4, 7));
        let rhs = control_rhs_blocks(&q, &sys, &pen);
        let a = &sys.drift;
        assert_eq!(linalg::max_abs(&rhs.first), 0.0);
        assert!(linalg::max_abs(&(&rhs.cross + a.transpose() * &q.cross)) < 1e-15);
        let lyap = -(a.transpose() * &q.last) - &q.last * a;
        assert!(linalg::max_abs(&(&rhs.last - lyap)) < 1e-15);
    }

    #[test]
    fn static_plant_without_actuator_keeps_terminal_weight() {
        let (mut sys, pen) = setup();
        for m in [&mut sys.actuator, &mut sys.aug_actuator, &mut sys.drift, &mut sys.aug_drift] {
            m.fill(0.0);
        }
        let sol = solve_control(&sys, &pen, 2.0, 20).unwrap();
        assert!(sol.full.values.iter().all(|q| *q == sys.terminal_weight));
        assert!(sol.gain.values.iter().all(|c| linalg::max_abs(c) == 0.0));
    }

    #[test]
    fn terminal_conditions_exact_even_on_single_step_grid() {
        let (sys, pen) = setup();
        let sol = solve_control(&sys, &pen, 5.0, 1).unwrap();
        assert_eq!(sol.blocks.values.len(), 2);
        let last = sol.blocks.last();
        assert_eq!(last.first, sys.weight);
        assert_eq!(last.cross, -&sys.weight);
        assert_eq!(last.last, sys.weight);
        assert_eq!(*sol.full.last(), sys.terminal_weight);
    }

    #[test]
    fn terminal_gain_is_proportional_deviation_feedback() {
        let (sys, pen) = setup();
        let sol = solve_control(&sys, &pen, 1.0, 100).unwrap();
        let sigma = &sys.weight;
        let expected = -(pen.inverse() * sys.actuator.transpose() * linalg::hstack(&(-sigma), sigma));
        assert_eq!(*sol.gain.last(), expected);
        // U(τ) = -Π⁻¹EᵀΣ(X̂ - X̂₀): the gain on X̂ is the negative of the gain on X̂₀.
        let c = sol.gain.last();
        assert_eq!(c.columns(0, 2).into_owned(), -c.columns(2, 2).into_owned());
    }

    #[test]
    fn terminal_feedback_weight_is_psd() {
        let (sys, pen) = setup();
        let f = DMatrix::<f64>::identity(2, 2);
        let w = &f * &sys.actuator * pen.inverse() * sys.actuator.transpose() * f.transpose();
        assert!(linalg::min_sym_eigenvalue(&w) >= -1e-15);
    }

    #[test]
    fn reference_q3_psd_and_q1_below_sigma() {
        let (sys, pen) = setup();
        let sol = solve_control(&sys, &pen, 5.0, 2000).unwrap();
        for q in &sol.blocks.values {
            assert!(linalg::min_sym_eigenvalue(&q.last) >= -1e-8);
            assert!(linalg::min_sym_eigenvalue(&(&sys.weight - &q.first)) >= -1e-8);
        }
        assert!(sol.min_eigenvalue >= -1e-8);
    }

    #[test]
    fn zero_blocks_give_zero_gain() {
        let (sys, pen) = setup();
        let z = DMatrix::zeros(2, 2);
        assert_eq!(linalg::max_abs(&feedback_gain(&z, &z, &sys, &pen)), 0.0);
    }
}
