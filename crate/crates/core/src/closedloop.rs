//! Closed-loop second moments, the terminal-integral cost and its optimality
//! diagnostics.
//!
//! With the controller state `x = (X̂₀; X̂)` and error `e = (X₀; X) - x`
//! uncorrelated, the second moment of the augmented plant splits as
//! `S = T + P`, where `T = E(x xᵀ)` solves a Lyapunov equation driven by the
//! gains `c(t)` and `K(t)`.

use nalgebra::{DMatrix, DVector};

use crate::control::{control_rhs_full, ControlSolution};
use crate::error::{Error, Result};
use crate::filtering::{filter_rhs_full, kalman_gain, FilterSolution};
use crate::linalg;
use crate::model::{ControlPenalty, SystemMatrices};
use crate::ode::{integrate_matrix_ode, sample_grid, Direction, TimeGrid};

#[derive(Debug, Clone)]
pub struct ClosedLoopSolution {
    /// Controller second moment `T = E(x xᵀ)`.
    pub second_moment: TimeGrid,
    /// `S = T + P`, real second moment of `(X₀; X)`.
    pub total_moment: Vec<DMatrix<f64>>,
    /// Mean-square deviation `Δ(t) = ⟨Λ, S(t)⟩`.
    pub deviation: Vec<f64>,
    /// Actuator effort `E‖U‖²_Π = ⟨cᵀΠc, T⟩`.
    pub effort: Vec<f64>,
    /// Running cost `Φ(t) = Δ(t) + ∫₀ᵗ E‖U‖²_Π`. Not monotone in general: the
    /// horizon-`τ` controller may reduce `Δ` near `τ`.
    pub running_cost: Vec<f64>,
    /// Pontryagin Hamiltonian `⟨Q, KGKᵀ⟩ - ⟨Q̇, T⟩`.
    pub hamiltonian: Vec<f64>,
    /// `ℋ(t) - ∫₀ᵗ ⟨Q, d(KGKᵀ)/dt⟩`, which is conserved along the optimal
    /// trajectory even when the gain `K` varies in time.
    pub hamiltonian_balance: Vec<f64>,
    /// Controller mean `E x(t)` as a 2n×1 grid.
    pub mean: TimeGrid,
    /// `E U(t) = c(t) E x(t)`.
    pub actuator_mean: Vec<DVector<f64>>,
    /// Feedback gain the loop was closed with.
    pub gain: TimeGrid,
}

impl ClosedLoopSolution {
    pub fn times(&self) -> Vec<f64> {
        self.second_moment.times()
    }

    /// `Φ(τ)`.
    pub fn final_cost(&self) -> f64 {
        *self.running_cost.last().expect("non-empty grid")
    }
}

/// `(sA + sE c)T + T(sA + sE c)ᵀ + K G Kᵀ`.
pub fn moment_rhs(
    t: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    kalman: &DMatrix<f64>,
    sys: &SystemMatrices,
) -> DMatrix<f64> {
    let closed = &sys.aug_drift + &sys.aug_actuator * gain;
    &closed * t + t * closed.transpose() + kalman * &sys.obs_diffusion * kalman.transpose()
}

/// `⟨Λ, S⟩`.
pub fn deviation(total_moment: &DMatrix<f64>, terminal_weight: &DMatrix<f64>) -> f64 {
    linalg::frobenius(terminal_weight, total_moment)
}

/// Composite trapezoid rule on a (possibly non-uniform) grid.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Running trapezoid integral, starting at zero.
pub fn cumulative_trapezoid(times: &[f64], values: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(values.len());
    out.push(0.0);
    for (t, v) in times.windows(2).zip(values.windows(2)) {
        acc += 0.5 * (t[1] - t[0]) * (v[0] + v[1]);
        out.push(acc);
    }
    out
}

/// `T(0) = [[1,1],[1,1]] ⊗ (E X₀ E X₀ᵀ)`.
pub fn initial_second_moment(mean0: &DVector<f64>) -> DMatrix<f64> {
    linalg::kron(&DMatrix::from_element(2, 2, 1.0), &linalg::outer(mean0, mean0))
}

/// Closes the loop with the optimal gain of `control`.
pub fn solve_closed_loop(
    sys: &SystemMatrices,
    filter: &FilterSolution,
    control: &ControlSolution,
    penalty: &ControlPenalty,
    mean0: &DVector<f64>,
) -> Result<ClosedLoopSolution> {
    solve_closed_loop_with_gain(sys, filter, control, &control.gain, penalty, mean0)
}

/// Closes the loop with an arbitrary feedback gain schedule on the shared
/// grid. `control` still supplies `Q` for the Hamiltonian diagnostics.
pub fn solve_closed_loop_with_gain(
    sys: &SystemMatrices,
    filter: &FilterSolution,
    control: &ControlSolution,
    gain: &TimeGrid,
    penalty: &ControlPenalty,
    mean0: &DVector<f64>,
) -> Result<ClosedLoopSolution> {
    if !filter.blocks.same_nodes(&control.blocks) || !filter.blocks.same_nodes(gain) {
        return Err(Error::GridMismatch(format!(
            "filter [{}, {}]/{} vs control [{}, {}]/{} vs gain [{}, {}]/{}",
            filter.blocks.t0,
            filter.blocks.t1,
            filter.blocks.steps(),
            control.blocks.t0,
            control.blocks.t1,
            control.blocks.steps(),
            gain.t0,
            gain.t1,
            gain.steps()
        )));
    }
    let n2 = 2 * sys.n;
    if mean0.len() != sys.n {
        return Err(Error::Dimension(format!("mean0 has length {}, expected {}", mean0.len(), sys.n)));
    }
    if gain.first().shape() != (sys.actuator_channels(), n2) {
        return Err(Error::Dimension("feedback gain must be d×2n".into()));
    }
    let (t0, t1, steps) = (gain.t0, gain.t1, gain.steps());
    let kalman = &filter.gain;

    // Stage times lie inside [t0, t1] up to round-off, which `sample_grid` absorbs.
    let gains_at = |t: f64| {
        let c = sample_grid(gain, t).expect("stage time within grid");
        let k = sample_grid(kalman, t).expect("stage time within grid");
        (c, k)
    };
    let second_moment = integrate_matrix_ode(
        |t, m: &DMatrix<f64>| {
            let (c, k) = gains_at(t);
            moment_rhs(m, &c, &k, sys)
        },
        initial_second_moment(mean0),
        t0,
        t1,
        steps,
        Direction::Forward,
        true,
    )
    .map_err(|e| e.context("closed-loop second moment"))?;

    let mean_init = linalg::vstack(
        &DMatrix::from_column_slice(sys.n, 1, mean0.as_slice()),
        &DMatrix::from_column_slice(sys.n, 1, mean0.as_slice()),
    );
    let mean = integrate_matrix_ode(
        |t, x: &DMatrix<f64>| {
            let c = sample_grid(gain, t).expect("stage time within grid");
            (&sys.aug_drift + &sys.aug_actuator * c) * x
        },
        mean_init,
        t0,
        t1,
        steps,
        Direction::Forward,
        false,
    )
    .map_err(|e| e.context("closed-loop mean"))?;

    let times = second_moment.times();
    let lambda = &sys.terminal_weight;
    let pi = penalty.matrix();
    let g = &sys.obs_diffusion;

    let mut total_moment = Vec::with_capacity(steps + 1);
    let mut deviation_grid = Vec::with_capacity(steps + 1);
    let mut effort = Vec::with_capacity(steps + 1);
    let mut hamiltonian = Vec::with_capacity(steps + 1);
    let mut explicit_rate = Vec::with_capacity(steps + 1);
    let mut actuator_mean = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t_i = &second_moment.values[i];
        let p_i = filter.assembled(i);
        let s_i = t_i + &p_i;
        deviation_grid.push(deviation(&s_i, lambda));
        total_moment.push(s_i);

        let c_i = &gain.values[i];
        effort.push(linalg::frobenius(&(c_i.transpose() * pi * c_i), t_i));
        actuator_mean.push(DVector::from_column_slice((c_i * &mean.values[i]).as_slice()));

        let q_i = control.assembled(i);
        let q_dot = control_rhs_full(&q_i, sys, penalty);
        hamiltonian.push(pontryagin_hamiltonian(&q_i, t_i, &kalman.values[i], g, &q_dot));
        explicit_rate.push(gain_forcing_rate(&q_i, &p_i, sys));
    }
    let running_cost = cumulative_trapezoid(&times, &effort)
        .into_iter()
        .zip(&deviation_grid)
        .map(|(integral, delta)| delta + integral)
        .collect();
    let hamiltonian_balance = cumulative_trapezoid(&times, &explicit_rate)
        .into_iter()
        .zip(&hamiltonian)
        .map(|(drift, h)| h - drift)
        .collect();

    Ok(ClosedLoopSolution {
        second_moment,
        total_moment,
        deviation: deviation_grid,
        effort,
        running_cost,
        hamiltonian,
        hamiltonian_balance,
        mean,
        actuator_mean,
        gain: gain.clone(),
    })
}

/// `Φ(τ) = Δ(τ) + ∫₀^τ ⟨cᵀΠc, T⟩ dt` by the trapezoid rule, recomputed from
/// the stored moments and gains.
pub fn cost(solution: &ClosedLoopSolution, penalty: &ControlPenalty) -> f64 {
    let times = solution.times();
    let pi = penalty.matrix();
    let integrand: Vec<f64> = solution
        .gain
        .values
        .iter()
        .zip(&solution.second_moment.values)
        .map(|(c, t)| linalg::frobenius(&(c.transpose() * pi * c), t))
        .collect();
    solution.deviation.last().copied().unwrap_or(0.0) + trapezoid(&times, &integrand)
}

/// `⟨Λ, P(τ)⟩ + ⟨Q(0), T(0)⟩ + ∫₀^τ ⟨Q, K G Kᵀ⟩ dt`, the minimum of the cost
/// expressed through the two Riccati solutions alone.
pub fn min_cost_identity(
    filter: &FilterSolution,
    control: &ControlSolution,
    initial_moment: &DMatrix<f64>,
    terminal_weight: &DMatrix<f64>,
    obs_diffusion: &DMatrix<f64>,
) -> f64 {
    let last = filter.blocks.steps();
    let times = filter.times();
    let forcing = noise_forcing(filter, control, obs_diffusion);
    linalg::frobenius(terminal_weight, &filter.assembled(last))
        + linalg::frobenius(&control.assembled(0), initial_moment)
        + trapezoid(&times, &forcing)
}

/// `⟨Q(t), K(t) G K(t)ᵀ⟩` at every node.
fn noise_forcing(
    filter: &FilterSolution,
    control: &ControlSolution,
    obs_diffusion: &DMatrix<f64>,
) -> Vec<f64> {
    filter
        .gain
        .values
        .iter()
        .enumerate()
        .map(|(i, k)| linalg::frobenius(&control.assembled(i), &(k * obs_diffusion * k.transpose())))
        .collect()
}

/// `ℋ = ⟨Q, K G Kᵀ⟩ - ⟨Q̇, T⟩`.
pub fn pontryagin_hamiltonian(
    q: &DMatrix<f64>,
    t: &DMatrix<f64>,
    kalman: &DMatrix<f64>,
    obs_diffusion: &DMatrix<f64>,
    q_dot: &DMatrix<f64>,
) -> f64 {
    linalg::frobenius(q, &(kalman * obs_diffusion * kalman.transpose())) - linalg::frobenius(q_dot, t)
}

/// Explicit time derivative of the Hamiltonian, `⟨Q, d(KGKᵀ)/dt⟩`, with
/// `K̇ = Ṗ sCᵀ G⁻¹` taken from the filtering Riccati equation.
pub fn gain_forcing_rate(q: &DMatrix<f64>, p: &DMatrix<f64>, sys: &SystemMatrices) -> f64 {
    let k = kalman_gain(p, sys);
    let k_dot = filter_rhs_full(p, sys) * sys.aug_observation.transpose() * &sys.obs_diffusion_inv;
    let k_dot_g_kt = &k_dot * &sys.obs_diffusion * k.transpose();
    linalg::frobenius(q, &(&k_dot_g_kt + k_dot_g_kt.transpose()))
}

/// `max |ℋ(t) - ℋ̄| / (1 + |ℋ̄|)` with `ℋ̄` the time average.
pub fn relative_variation(times: &[f64], values: &[f64]) -> f64 {
    let span = times[times.len() - 1] - times[0];
    let mean = trapezoid(times, values) / span;
    values
        .iter()
        .map(|v| (v - mean).abs())
        .fold(0.0, f64::max)
        / (1.0 + mean.abs())
}

/// HJB integrand `⟨Q, 𝓡(Γ, u)⟩ + ⟨uᵀΠu, Γ⟩`, minimized over `u` by the
/// optimal gain whenever `Γ ⪰ 0`.
pub fn hjb_integrand(
    q: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    u: &DMatrix<f64>,
    kalman: &DMatrix<f64>,
    sys: &SystemMatrices,
    penalty: &ControlPenalty,
) -> f64 {
    linalg::frobenius(q, &moment_rhs(gamma, u, kalman, sys))
        + linalg::frobenius(&(u.transpose() * penalty.matrix() * u), gamma)
}

/// Bellman function `Ψ(t, Γ) = ⟨Q(t), Γ⟩ + ∫_t^τ ⟨Q, K G Kᵀ⟩`. `t` must be a
/// grid node.
pub fn bellman_value(
    t: f64,
    gamma: &DMatrix<f64>,
    control: &ControlSolution,
    filter: &FilterSolution,
    obs_diffusion: &DMatrix<f64>,
) -> Result<f64> {
    let i = control.blocks.node_index(t).ok_or(Error::OutOfRange {
        t,
        t0: control.blocks.t0,
        t1: control.blocks.t1,
    })?;
    let times = filter.times();
    let forcing = noise_forcing(filter, control, obs_diffusion);
    Ok(linalg::frobenius(&control.assembled(i), gamma) + trapezoid(&times[i..], &forcing[i..]))
}

/// First time the running cost reaches `ε Φ*`, linearly interpolated between
/// the bracketing nodes; `None` if the threshold is not reached on the grid.
pub fn decoherence_time(
    times: &[f64],
    running_cost: &[f64],
    epsilon: f64,
    phi_star: f64,
) -> Result<Option<f64>> {
    let threshold = epsilon * phi_star;
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::Parameter(format!(
            "decoherence threshold ε·Φ* = {threshold} must be positive"
        )));
    }
    if times.len() != running_cost.len() || times.is_empty() {
        return Err(Error::Dimension("time and cost grids differ in length".into()));
    }
    let Some(i) = running_cost.iter().position(|&phi| phi >= threshold) else {
        return Ok(None);
    };
    if i == 0 {
        return Ok(Some(times[0]));
    }
    let (lo, hi) = (running_cost[i - 1], running_cost[i]);
    let w = (threshold - lo) / (hi - lo);
    Ok(Some(times[i - 1] + w * (times[i] - times[i - 1])))
}

/// Default reference scale `Φ* = ⟨Λ, P(0) + T(0)⟩ + 1`.
pub fn default_phi_star(sys: &SystemMatrices, filter: &FilterSolution, mean0: &DVector<f64>) -> f64 {
    deviation(&(filter.assembled(0) + initial_second_moment(mean0)), &sys.terminal_weight) + 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::solve_control;
    use crate::filtering::solve_filter;
    use crate::model::derive_system_matrices;
    use crate::scenarios;

    #[test]
    fn moment_rhs_zero_inputs() {
        let sys = derive_system_matrices(&scenarios::reference()).unwrap();
        let rhs = moment_rhs(&DMatrix::zeros(4, 4), &DMatrix::zeros(1, 4), &DMatrix::zeros(4, 1), &sys);
        assert_eq!(linalg::max_abs(&rhs), 0.0);
    }

    #[test]
    fn moment_rhs_open_loop_and_symmetry() {
        let sys = derive_system_matrices(&scenarios::reference()).unwrap();
        let t = DMatrix::from_fn(4, 4, |i, j| 1.0 / (1 + i + j) as f64);
        let k = DMatrix::from_column_slice(4, 1, &[0.1, -0.2, 0.3, 0.05]);
        let open = moment_rhs(&t, &DMatrix::zeros(1, 4), &k, &sys);
        let expected = &sys.aug_drift * &t + &t * sys.aug_drift.transpose() + &k * k.transpose();
        assert!(linalg::max_abs(&(&open - expected)) < 1e-15);
        let c = DMatrix::from_row_slice(1, 4, &[0.4, -1.0, 0.2, 0.7]);
        assert!(linalg::asymmetry(&moment_rhs(&t, &c, &k, &sys)) < 1e-15);
    }

    #[test]
    fn deviation_of_duplicated_moment_is_zero() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let lambda = linalg::kron(&DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]), &sigma);
        let any = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, -2.0, 7.0]);
        let dup = linalg::kron(&DMatrix::from_element(2, 2, 1.0), &any);
        assert_eq!(deviation(&dup, &lambda), 0.0);
        assert!((deviation(&lambda, &lambda) - lambda.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_exact_for_linear() {
        let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let values: Vec<f64> = times.iter().map(|t| 2.0 * t + 1.0).collect();
        assert!((trapezoid(&times, &values) - 2.0).abs() < 1e-14);
        let cum = cumulative_trapezoid(&times, &values);
        assert_eq!(cum[0], 0.0);
        assert!((cum[5] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn decoherence_never_reached_on_flat_cost() {
        let times = [0.0, 1.0, 2.0];
        assert_eq!(decoherence_time(&times, &[0.0; 3], 0.1, 1.0).unwrap(), None);
    }

    #[test]
    fn decoherence_interpolates_first_crossing() {
        let times = [0.0, 1.0, 2.0, 3.0];
        let phi = [0.0, 1.0, 3.0, 2.0];
        let t = decoherence_time(&times, &phi, 0.5, 4.0).unwrap().unwrap();
        assert!((t - 1.5).abs() < 1e-15);
        let early = decoherence_time(&times, &phi, 0.01, 1.0).unwrap().unwrap();
        assert!((early - 0.01).abs() < 1e-15);
    }

    #[test]
    fn decoherence_rejects_nonpositive_threshold() {
        let times = [0.0, 1.0];
        assert!(matches!(decoherence_time(&times, &[0.0, 1.0], 0.0, 1.0), Err(Error::Parameter(_))));
        assert!(matches!(decoherence_time(&times, &[0.0, 1.0], 0.1, -2.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_system_has_zero_moments_and_cost() {
        let mut spec = scenarios::reference();
        spec.field_coupling = DMatrix::zeros(2, 2);
        spec.cov0 = DMatrix::zeros(2, 2);
        spec.mean0 = DVector::zeros(2);
        let sys = derive_system_matrices(&spec).unwrap();
        let pen = ControlPenalty::new(spec.control_penalty.clone()).unwrap();
        let filter = solve_filter(&sys, &spec.cov0, 1.0, 50).unwrap();
        let control = solve_control(&sys, &pen, 1.0, 50).unwrap();
        let cl = solve_closed_loop(&sys, &filter, &control, &pen, &spec.mean0).unwrap();
        assert!(cl.second_moment.values.iter().all(|t| linalg::max_abs(t) == 0.0));
        assert!(cl.deviation.iter().all(|&d| d == 0.0));
        assert!(cl.running_cost.iter().all(|&p| p == 0.0));
        let identity = min_cost_identity(
            &filter,
            &control,
            &initial_second_moment(&spec.mean0),
            &sys.terminal_weight,
            &sys.obs_diffusion,
        );
        assert_eq!(identity, 0.0);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let spec = scenarios::reference();
        let sys = derive_system_matrices(&spec).unwrap();
        let pen = ControlPenalty::new(spec.control_penalty.clone()).unwrap();
        let filter = solve_filter(&sys, &spec.cov0, 1.0, 40).unwrap();
        let control = solve_control(&sys, &pen, 1.0, 50).unwrap();
        assert!(matches!(
            solve_closed_loop(&sys, &filter, &control, &pen, &spec.mean0),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn bellman_boundary_and_zero_argument() {
        let spec = scenarios::reference();
        let sys = derive_system_matrices(&spec).unwrap();
        let pen = ControlPenalty::new(spec.control_penalty.clone()).unwrap();
        let filter = solve_filter(&sys, &spec.cov0, 1.0, 100).unwrap();
        let control = solve_control(&sys, &pen, 1.0, 100).unwrap();
        let gamma = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 + i as f64 } else { 0.1 });
        let at_end = bellman_value(1.0, &gamma, &control, &filter, &sys.obs_diffusion).unwrap();
        assert!((at_end - linalg::frobenius(&sys.terminal_weight, &gamma)).abs() < 1e-14);

        let zero = DMatrix::zeros(4, 4);
        let tail = bellman_value(0.5, &zero, &control, &filter, &sys.obs_diffusion).unwrap();
        let forcing = noise_forcing(&filter, &control, &sys.obs_diffusion);
        assert!((tail - trapezoid(&filter.times()[50..], &forcing[50..])).abs() < 1e-15);
        assert!(bellman_value(0.505, &zero, &control, &filter, &sys.obs_diffusion).is_err());
    }
}
