//! Forward Riccati equation for the error covariance of the joint
//! smoother/filter estimate of `(X₀; X(t))`.
//!
//! `P = Re cov(e)` for `e = (X₀ - X̂₀; X - X̂)` is partitioned into `n×n`
//! blocks `[[P1, P2], [P2ᵀ, P3]]`. `P3` obeys the usual filtering Riccati
//! equation, `P2` is driven by `P3`, and `P1` (the smoothing error covariance
//! of the initial state) is driven by `P2` and is non-increasing.

use log::warn;
use nalgebra::{Complex, DMatrix};

use crate::error::Result;
use crate::linalg;
use crate::model::SystemMatrices;
use crate::ode::{integrate_matrix_ode, BlockTriple, Direction, OdeState, TimeGrid};

/// Eigenvalue floor below which a covariance is reported as losing PSD.
pub const PSD_WARN_TOL: f64 = -1e-8;

/// Error covariance and Kalman gain schedule on a uniform grid.
#[derive(Debug, Clone)]
pub struct FilterSolution {
    /// Full `2n×2n` Riccati solution, kept as a cross-check of `blocks`.
    pub full: TimeGrid,
    /// Authoritative block solution `(P1, P2, P3)`.
    pub blocks: TimeGrid<BlockTriple>,
    /// Kalman gain `K(t)` (2n×r) computed from `blocks`.
    pub gain: TimeGrid,
    /// Smallest eigenvalue of the assembled `P` over the grid.
    pub min_eigenvalue: f64,
}

impl FilterSolution {
    pub fn times(&self) -> Vec<f64> {
        self.blocks.times()
    }

    /// `[[P1, P2], [P2ᵀ, P3]]` at node `i`.
    pub fn assembled(&self, i: usize) -> DMatrix<f64> {
        assemble(&self.blocks.values[i])
    }

    pub fn assembled_grid(&self) -> TimeGrid {
        self.blocks.map(assemble)
    }

    /// `max_i ‖P_full - assemble(P1,P2,P3)‖_max / (1 + ‖P_full‖_max)`.
    pub fn block_full_deviation(&self) -> f64 {
        relative_grid_deviation(&self.full, &self.assembled_grid())
    }
}

pub(crate) fn relative_grid_deviation(full: &TimeGrid, blocks: &TimeGrid) -> f64 {
    full.values
        .iter()
        .zip(&blocks.values)
        .map(|(f, b)| linalg::max_abs(&(f - b)) / (1.0 + linalg::max_abs(f)))
        .fold(0.0, f64::max)
}

fn assemble(b: &BlockTriple) -> DMatrix<f64> {
    linalg::block2(&b.first, &b.cross, &b.cross.transpose(), &b.last)
}

/// `K = (P sCᵀ + sB Dᵀ) G⁻¹`.
pub fn kalman_gain(p: &DMatrix<f64>, sys: &SystemMatrices) -> DMatrix<f64> {
    (p * sys.aug_observation.transpose() + &sys.aug_noise * sys.measurement.transpose())
        * &sys.obs_diffusion_inv
}

/// Kalman gain from the blocks: `[P2 Cᵀ; P3 Cᵀ + B Dᵀ] G⁻¹`.
pub fn kalman_gain_blocks(p: &BlockTriple, sys: &SystemMatrices) -> DMatrix<f64> {
    let ct = sys.observation.transpose();
    let top = &p.cross * &ct * &sys.obs_diffusion_inv;
    let bottom = (&p.last * &ct + &sys.noise * sys.measurement.transpose()) * &sys.obs_diffusion_inv;
    linalg::vstack(&top, &bottom)
}

/// `sA P + P sAᵀ + sB sBᵀ - K G Kᵀ` with the Kalman gain of `P`.
pub fn filter_rhs_full(p: &DMatrix<f64>, sys: &SystemMatrices) -> DMatrix<f64> {
    let k = kalman_gain(p, sys);
    &sys.aug_drift * p + p * sys.aug_drift.transpose() + &sys.aug_noise * sys.aug_noise.transpose()
        - &k * &sys.obs_diffusion * k.transpose()
}

/// Block form of [`filter_rhs_full`]:
///
/// ```text
/// Ṗ1 = -P2 Cᵀ G⁻¹ C P2ᵀ
/// Ṗ2 = P2 (Aᵀ - Cᵀ G⁻¹ (C P3 + D Bᵀ))
/// Ṗ3 = A P3 + P3 Aᵀ + B Bᵀ - (P3 Cᵀ + B Dᵀ) G⁻¹ (C P3 + D Bᵀ)
/// ```
pub fn filter_rhs_blocks(p: &BlockTriple, sys: &SystemMatrices) -> BlockTriple {
    let c = &sys.observation;
    let ct = c.transpose();
    let g_inv = &sys.obs_diffusion_inv;
    let a = &sys.drift;
    let b = &sys.noise;
    // C P3 + D Bᵀ, the transpose of the bottom gain numerator.
    let innov = c * &p.last + &sys.measurement * b.transpose();

    let p2_ct = &p.cross * &ct;
    let first = -(&p2_ct * g_inv * p2_ct.transpose());
    let cross = &p.cross * (a.transpose() - &ct * g_inv * &innov);
    let last = a * &p.last + &p.last * a.transpose() + b * b.transpose()
        - innov.transpose() * g_inv * &innov;
    BlockTriple { first, cross, last }
}

/// Right-hand side of the error-covariance Lyapunov equation for an arbitrary
/// gain `K`: `(sA - K sC) P + P (sA - K sC)ᵀ + (sB - K D)(sB - K D)ᵀ`.
pub fn error_covariance_rhs(
    p: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    sys: &SystemMatrices,
) -> DMatrix<f64> {
    let closed = &sys.aug_drift - gain * &sys.aug_observation;
    let input = &sys.aug_noise - gain * &sys.measurement;
    &closed * p + p * closed.transpose() + &input * input.transpose()
}

/// Integrates the filtering Riccati equation forward from
/// `P1(0) = P2(0) = P3(0) = cov0`, both in block form and as one `2n×2n`
/// matrix.
pub fn solve_filter(
    sys: &SystemMatrices,
    cov0: &DMatrix<f64>,
    horizon: f64,
    steps: usize,
) -> Result<FilterSolution> {
    let init = BlockTriple {
        first: cov0.clone(),
        cross: cov0.clone(),
        last: cov0.clone(),
    };
    let blocks = integrate_matrix_ode(
        |_, p: &BlockTriple| filter_rhs_blocks(p, sys),
        init.clone(),
        0.0,
        horizon,
        steps,
        Direction::Forward,
        true,
    )
    .map_err(|e| e.context("filter Riccati (blocks)"))?;
    let full = integrate_matrix_ode(
        |_, p: &DMatrix<f64>| filter_rhs_full(p, sys),
        assemble(&init),
        0.0,
        horizon,
        steps,
        Direction::Forward,
        true,
    )
    .map_err(|e| e.context("filter Riccati (full)"))?;
    let gain = blocks.map(|p| kalman_gain_blocks(p, sys));

    let min_eigenvalue = blocks
        .values
        .iter()
        .map(|b| linalg::min_sym_eigenvalue(&assemble(b)))
        .fold(f64::INFINITY, f64::min);
    if min_eigenvalue < PSD_WARN_TOL {
        warn!("filter error covariance lost positive semidefiniteness: λ_min = {min_eigenvalue:e}");
    }

    Ok(FilterSolution {
        full,
        blocks,
        gain,
        min_eigenvalue,
    })
}

/// Pair of matrices advanced together so that both see the same RK4 stages.
#[derive(Debug, Clone)]
struct CovariancePair {
    optimal: DMatrix<f64>,
    perturbed: DMatrix<f64>,
}

impl OdeState for CovariancePair {
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        self.optimal.add_scaled(alpha, &other.optimal);
        self.perturbed.add_scaled(alpha, &other.perturbed);
    }

    fn symmetrize(&mut self) {
        self.optimal.symmetrize();
        self.perturbed.symmetrize();
    }

    fn is_finite(&self) -> bool {
        self.optimal.is_finite() && self.perturbed.is_finite()
    }
}

/// Error covariance under the suboptimal gain `K*(t) + δK(t)`, integrated
/// jointly with the Riccati solution that supplies `K*(t)`.
///
/// Returns `(P, P̃)` on the shared grid. Minimality of the Kalman gain means
/// `P̃(t) - P(t) ⪰ 0` throughout.
pub fn solve_perturbed_error_covariance<F>(
    sys: &SystemMatrices,
    cov0: &DMatrix<f64>,
    perturbation: F,
    horizon: f64,
    steps: usize,
) -> Result<(TimeGrid, TimeGrid)>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let p0 = linalg::kron(&DMatrix::from_element(2, 2, 1.0), cov0);
    let grid = integrate_matrix_ode(
        |t, s: &CovariancePair| {
            let gain = kalman_gain(&s.optimal, sys) + perturbation(t);
            CovariancePair {
                optimal: filter_rhs_full(&s.optimal, sys),
                perturbed: error_covariance_rhs(&s.perturbed, &gain, sys),
            }
        },
        CovariancePair {
            optimal: p0.clone(),
            perturbed: p0,
        },
        0.0,
        horizon,
        steps,
        Direction::Forward,
        true,
    )?;
    Ok((
        grid.map(|s| s.optimal.clone()),
        grid.map(|s| s.perturbed.clone()),
    ))
}

/// Hamiltonian matrix of the filtering Riccati equation with its spectrum.
#[derive(Debug, Clone)]
pub struct HamiltonianMatrix {
    /// `[[α, β], [γ, -αᵀ]]` (4n×4n).
    pub matrix: DMatrix<f64>,
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub eigenvalues: Vec<Complex<f64>>,
}

impl HamiltonianMatrix {
    /// Number of eigenvalues with modulus at most `tol`.
    pub fn zero_eigenvalue_count(&self, tol: f64) -> usize {
        self.eigenvalues.iter().filter(|z| z.norm() <= tol).count()
    }
}

/// Builds `sH` with `α = sA - sB Dᵀ G⁻¹ sC`, `β = sB (I - Dᵀ G⁻¹ D) sBᵀ`,
/// `γ = sCᵀ G⁻¹ sC`. The spectrum is a diagnostic only.
pub fn hamiltonian_matrix(sys: &SystemMatrices) -> HamiltonianMatrix {
    let g_inv = &sys.obs_diffusion_inv;
    let d = &sys.measurement;
    let m = d.ncols();
    let alpha = &sys.aug_drift - &sys.aug_noise * d.transpose() * g_inv * &sys.aug_observation;
    let projector = DMatrix::identity(m, m) - d.transpose() * g_inv * d;
    let beta = &sys.aug_noise * projector * sys.aug_noise.transpose();
    let gamma = sys.aug_observation.transpose() * g_inv * &sys.aug_observation;
    let matrix = linalg::block2(&alpha, &beta, &gamma, &(-alpha.transpose()));
    let eigenvalues = matrix.complex_eigenvalues().iter().copied().collect();
    HamiltonianMatrix {
        matrix,
        alpha,
        beta,
        gamma,
        eigenvalues,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::derive_system_matrices;
    use crate::scenarios;

    fn reference_sys() -> SystemMatrices {
        derive_system_matrices(&scenarios::reference()).unwrap()
    }

    fn random_sym(k: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed;
        let raw = DMatrix::from_fn(k, k, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        });
        &raw + raw.transpose()
    }

    fn blocks_of(p: &DMatrix<f64>) -> BlockTriple {
        let (first, cross, _, last) = linalg::split_blocks(p);
        BlockTriple { first, cross, last }
    }

    #[test]
    fn noiseless_zero_covariance_is_fixed_point() {
        let mut sys = reference_sys();
        sys.aug_noise.fill(0.0);
        sys.noise.fill(0.0);
        let rhs = filter_rhs_full(&DMatrix::zeros(4, 4), &sys);
        assert_eq!(linalg::max_abs(&rhs), 0.0);
    }

    #[test]
    fn zero_observation_leaves_innovation_from_noise_only() {
        let mut sys = reference_sys();
        sys.observation.fill(0.0);
        sys.aug_observation.fill(0.0);
        let p = random_sym(4, 3);
        let g_inv = &sys.obs_diffusion_inv;
        let sb_dt = &sys.aug_noise * sys.measurement.transpose();
        let expected = &sys.aug_drift * &p + &p * sys.aug_drift.transpose()
            + &sys.aug_noise * sys.aug_noise.transpose()
            - &sb_dt * g_inv * sb_dt.transpose();
        assert!(linalg::max_abs(&(filter_rhs_full(&p, &sys) - expected)) < 1e-14);

        let rhs = filter_rhs_blocks(&blocks_of(&p), &sys);
        assert_eq!(linalg::max_abs(&rhs.first), 0.0);
        let p2 = p.view((0, 2), (2, 2)).into_owned();
        assert!(linalg::max_abs(&(&rhs.cross - &p2 * sys.drift.transpose())) < 1e-15);
    }

    #[test]
    fn block_rhs_matches_full_rhs() {
        let sys = reference_sys();
        for seed in 0..5 {
            let p = random_sym(4, seed);
            let full = filter_rhs_full(&p, &sys);
            let b = filter_rhs_blocks(&blocks_of(&p), &sys);
            let assembled = linalg::block2(&b.first, &b.cross, &b.cross.transpose(), &b.last);
            assert!(linalg::max_abs(&(full - assembled)) < 1e-13);
        }
    }

    #[test]
    fn identity_covariance_block_identity() {
        let sys = reference_sys();
        let p = DMatrix::identity(4, 4);
        let b = filter_rhs_blocks(&blocks_of(&p), &sys);
        let assembled = linalg::block2(&b.first, &b.cross, &b.cross.transpose(), &b.last);
        assert!(linalg::max_abs(&(filter_rhs_full(&p, &sys) - assembled)) < 1e-14);
    }

    #[test]
    fn decoupled_cross_block_freezes_smoother() {
        let sys = reference_sys();
        let p = BlockTriple {
            first: DMatrix::identity(2, 2),
            cross: DMatrix::zeros(2, 2),
            last: DMatrix::identity(2, 2) * 0.3,
        };
        let rhs = filter_rhs_blocks(&p, &sys);
        assert_eq!(linalg::max_abs(&rhs.first), 0.0);
        assert_eq!(linalg::max_abs(&rhs.cross), 0.0);
        let k = kalman_gain_blocks(&p, &sys);
        assert_eq!(linalg::max_abs(&k.rows(0, 2).into_owned()), 0.0);
    }

    #[test]
    fn gain_block_form_matches_full_form() {
        let sys = reference_sys();
        let p = random_sym(4, 11);
        let k_full = kalman_gain(&p, &sys);
        let k_blocks = kalman_gain_blocks(&blocks_of(&p), &sys);
        assert!(linalg::max_abs(&(k_full - k_blocks)) < 1e-15);
    }

    #[test]
    fn gain_vanishes_without_noise_or_observation() {
        let mut sys = reference_sys();
        for m in [&mut sys.noise, &mut sys.aug_noise, &mut sys.observation, &mut sys.aug_observation] {
            m.fill(0.0);
        }
        assert_eq!(linalg::max_abs(&kalman_gain(&random_sym(4, 2), &sys)), 0.0);
        assert_eq!(linalg::max_abs(&kalman_gain(&DMatrix::zeros(4, 4), &sys)), 0.0);
    }

    #[test]
    fn noiseless_zero_initial_covariance_stays_zero() {
        let mut sys = reference_sys();
        sys.noise.fill(0.0);
        sys.aug_noise.fill(0.0);
        let sol = solve_filter(&sys, &DMatrix::zeros(2, 2), 2.0, 50).unwrap();
        assert!(sol.blocks.values.iter().all(|b| linalg::max_abs(&b.first) == 0.0
            && linalg::max_abs(&b.cross) == 0.0
            && linalg::max_abs(&b.last) == 0.0));
        assert!(sol.gain.values.iter().all(|k| linalg::max_abs(k) == 0.0));
    }

    #[test]
    fn without_observation_smoother_covariance_is_constant() {
        let mut sys = reference_sys();
        sys.observation.fill(0.0);
        sys.aug_observation.fill(0.0);
        let cov0 = DMatrix::from_row_slice(2, 2, &[0.7, 0.1, 0.1, 0.4]);
        let sol = solve_filter(&sys, &cov0, 3.0, 300).unwrap();
        assert!(sol.blocks.values.iter().all(|b| b.first == cov0));
    }

    #[test]
    fn smoother_covariance_shrinks_on_reference() {
        let sys = reference_sys();
        let cov0 = DMatrix::identity(2, 2) * 0.5;
        let sol = solve_filter(&sys, &cov0, 5.0, 2000).unwrap();
        let drop = &sol.blocks.first().first - &sol.blocks.last().first;
        assert!(linalg::min_sym_eigenvalue(&drop) >= -1e-12);
        assert!(linalg::max_abs(&drop) > 0.1);
        assert_eq!(sol.blocks.first().first, cov0);
        assert_eq!(sol.blocks.first().cross, cov0);
        assert_eq!(sol.blocks.first().last, cov0);
    }

    #[test]
    fn hamiltonian_blocks_symmetric_and_singular() {
        let sys = reference_sys();
        let h = hamiltonian_matrix(&sys);
        assert!(linalg::asymmetry(&h.beta) < 1e-15);
        assert!(linalg::asymmetry(&h.gamma) < 1e-15);
        assert_eq!(h.matrix.shape(), (8, 8));
        assert!(h.zero_eigenvalue_count(1e-8) >= 4);
    }

    #[test]
    fn hamiltonian_vanishes_for_trivial_plant() {
        let mut sys = reference_sys();
        for m in [
            &mut sys.drift,
            &mut sys.aug_drift,
            &mut sys.noise,
            &mut sys.aug_noise,
            &mut sys.observation,
            &mut sys.aug_observation,
        ] {
            m.fill(0.0);
        }
        assert_eq!(linalg::max_abs(&hamiltonian_matrix(&sys).matrix), 0.0);
    }
}
