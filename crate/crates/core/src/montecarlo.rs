//! Classical Gaussian surrogate of the closed loop, simulated path by path
//! with Euler–Maruyama.
//!
//! Real parts of first and second moments of the linear quantum model driven
//! by vacuum fields coincide with those of the classical SDE driven by a
//! standard Wiener process, so the empirical moments are an independent check
//! of the Riccati/Lyapunov pipeline.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::closedloop::ClosedLoopSolution;
use crate::error::{Error, Result};
use crate::filtering::FilterSolution;
use crate::linalg;
use crate::model::{ControlPenalty, SystemMatrices};
use crate::ode::TimeGrid;

pub const DEFAULT_SUBSTEPS: usize = 4;

/// Paths per reduction block. Fixed so that the floating-point summation
/// order does not depend on the number of worker threads.
const BLOCK_PATHS: usize = 64;

/// `splitmix64` finalizer applied to a counter.
pub fn splitmix64(index: u64) -> u64 {
    let mut z = index.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of path `index` in an ensemble with `base_seed`.
pub fn path_seed(base_seed: u64, index: u64) -> u64 {
    base_seed ^ splitmix64(index)
}

/// Node indices `round(j·steps/count)`, `j = 1..=count`, deduplicated.
pub fn evenly_spaced_checkpoints(steps: usize, count: usize) -> Vec<usize> {
    let mut nodes: Vec<usize> = (1..=count)
        .map(|j| ((j * steps) as f64 / count as f64).round() as usize)
        .collect();
    nodes.dedup();
    nodes
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateState {
    pub time: f64,
    /// Augmented plant `(X₀; X)`.
    pub plant: DVector<f64>,
    /// Controller `(X̂₀; X̂)`.
    pub controller: DVector<f64>,
}

impl SurrogateState {
    /// Estimation error `e = plant − controller`.
    pub fn error(&self) -> DVector<f64> {
        &self.plant - &self.controller
    }
}

/// Feedback and filter gain schedules on a shared grid.
#[derive(Debug, Clone, Copy)]
pub struct LoopGains<'a> {
    /// Kalman gain `K(t)` (2n×r).
    pub kalman: &'a TimeGrid,
    /// Actuator gain `c(t)` (d×2n).
    pub feedback: &'a TimeGrid,
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub paths: usize,
    pub base_seed: u64,
    pub substeps_per_node: usize,
    /// Grid nodes at which moments are accumulated.
    pub checkpoints: Vec<usize>,
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    fn from_sums(sum: f64, sum_sq: f64, count: usize) -> Self {
        let k = count as f64;
        let mean = sum / k;
        let var = ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0);
        Estimate {
            mean,
            std_error: (var / k).sqrt(),
        }
    }

    /// `|mean − reference| / std_error`; zero when both the spread and the
    /// discrepancy vanish.
    pub fn z_score(&self, reference: f64) -> f64 {
        let diff = (self.mean - reference).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.std_error
        }
    }
}

/// Empirical moments at one checkpoint node.
#[derive(Debug, Clone)]
pub struct CheckpointMoments {
    pub node: usize,
    pub time: f64,
    /// Mean of `z = (plant; controller)`.
    pub mean: DVector<f64>,
    /// `Ê(z zᵀ)`.
    pub second_moment: DMatrix<f64>,
    /// `Ê(e)` and its per-entry standard error.
    pub error_mean: DVector<f64>,
    pub error_mean_se: DVector<f64>,
    /// `Ê(e eᵀ)`.
    pub error_second_moment: DMatrix<f64>,
    /// `Ê(x xᵀ)`.
    pub controller_second_moment: DMatrix<f64>,
    /// `Ê(x eᵀ)` and its per-entry standard error.
    pub cross_moment: DMatrix<f64>,
    pub cross_moment_se: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleMoments {
    pub paths: usize,
    pub substeps_per_node: usize,
    pub checkpoints: Vec<CheckpointMoments>,
    /// `‖F(X(τ) − X₀)‖²`.
    pub deviation: Estimate,
    /// `∫₀^τ ‖U‖²_Π dt`, per-path trapezoid over the grid nodes.
    pub effort: Estimate,
    /// `‖F(X(τ) − X₀)‖² + ∫ ‖U‖²_Π dt`.
    pub cost: Estimate,
    /// `‖X₀ − X̂₀(τ)‖²`.
    pub smoothing_error: Estimate,
}

/// Row-major copy of a matrix.
fn flat(a: &DMatrix<f64>) -> Vec<f64> {
    linalg::vec_row_major(a)
}

/// `out += scale · a·v` for a row-major `rows×cols` matrix `a`.
#[inline]
fn mul_add(out: &mut [f64], a: &[f64], cols: usize, v: &[f64], scale: f64) {
    for (o, row) in out.iter_mut().zip(a.chunks_exact(cols.max(1))) {
        let mut acc = 0.0;
        for (x, y) in row.iter().zip(v) {
            acc += x * y;
        }
        *o += scale * acc;
    }
}

/// Precomputed Euler–Maruyama data shared by all paths.
///
/// The augmented drift, noise and actuator matrices vanish on the `X₀` rows,
/// so a path carries `y = (X, X̂₀, X̂)` (3n entries) plus the frozen `X₀`.
/// With the gains fixed at the start of a substep, one Euler–Maruyama step is
/// the affine map `y ← M y + N dw`, stored per substep as the row-major
/// `3n × (3n + m)` matrix `[M | N]`.
struct Stepper {
    n: usize,
    m: usize,
    d: usize,
    steps: usize,
    substeps: usize,
    sqrt_h: f64,
    times: Vec<f64>,
    transitions: Vec<f64>,
    /// Feedback gain at the grid nodes, `(steps + 1) × d×2n`.
    node_feedback: Vec<f64>,
    weight: Vec<f64>,
    penalty: Vec<f64>,
    mean0: Vec<f64>,
    cov0_factor: Vec<f64>,
}

/// `[M | N]` of one Euler–Maruyama substep of length `h` with feedback gain
/// `c = [c₀, c₁]` and Kalman gain `K = [K₀; K₁]`:
///
/// ```text
/// X'  = X  + h(A X + E U) + B dw
/// X̂₀' = X̂₀ + K₀ dV
/// X̂'  = X̂  + h(A X̂ + E U) + K₁ dV
/// U = c₀ X̂₀ + c₁ X̂,   dV = C(X − X̂)h + D dw
/// ```
fn substep_transition(sys: &SystemMatrices, feedback: &DMatrix<f64>, kalman: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let n = sys.n;
    let m = sys.field_channels();
    let (a, b, e, c, dm) = (&sys.drift, &sys.noise, &sys.actuator, &sys.observation, &sys.measurement);
    let ec0 = e * feedback.columns(0, n) * h;
    let ec1 = e * feedback.columns(n, n) * h;
    let k0 = kalman.rows(0, n);
    let k1 = kalman.rows(n, n);
    let k0c = k0 * c * h;
    let k1c = k1 * c * h;
    let eye = DMatrix::<f64>::identity(n, n);
    let step = &eye + a * h;

    let mut t = DMatrix::zeros(3 * n, 3 * n + m);
    t.view_mut((0, 0), (n, n)).copy_from(&step);
    t.view_mut((0, n), (n, n)).copy_from(&ec0);
    t.view_mut((0, 2 * n), (n, n)).copy_from(&ec1);
    t.view_mut((0, 3 * n), (n, m)).copy_from(b);

    t.view_mut((n, 0), (n, n)).copy_from(&k0c);
    t.view_mut((n, n), (n, n)).copy_from(&eye);
    t.view_mut((n, 2 * n), (n, n)).copy_from(&(-&k0c));
    t.view_mut((n, 3 * n), (n, m)).copy_from(&(k0 * dm));

    t.view_mut((2 * n, 0), (n, n)).copy_from(&k1c);
    t.view_mut((2 * n, n), (n, n)).copy_from(&ec0);
    t.view_mut((2 * n, 2 * n), (n, n)).copy_from(&(&step + &ec1 - &k1c));
    t.view_mut((2 * n, 3 * n), (n, m)).copy_from(&(k1 * dm));
    t
}

impl Stepper {
    fn new(
        sys: &SystemMatrices,
        gains: LoopGains<'_>,
        penalty: Option<&ControlPenalty>,
        mean0: &DVector<f64>,
        cov0_factor: &DMatrix<f64>,
        substeps: usize,
    ) -> Result<Self> {
        let (n, n2) = (sys.n, 2 * sys.n);
        let (m, d, r) = (
            sys.field_channels(),
            sys.actuator_channels(),
            sys.observation_channels(),
        );
        if substeps == 0 {
            return Err(Error::Parameter("substeps_per_node must be ≥ 1".into()));
        }
        if !gains.kalman.same_nodes(gains.feedback) {
            return Err(Error::GridMismatch("Kalman and feedback gain grids differ".into()));
        }
        if gains.kalman.first().shape() != (n2, r) || gains.feedback.first().shape() != (d, n2) {
            return Err(Error::Dimension("gain schedules do not match the system".into()));
        }
        if mean0.len() != n || cov0_factor.shape() != (n, n) {
            return Err(Error::Dimension("initial mean/covariance factor must be n-dimensional".into()));
        }
        let steps = gains.kalman.steps();
        let h = gains.kalman.step_size() / substeps as f64;

        let mut transitions = Vec::with_capacity(steps * substeps * 3 * n * (3 * n + m));
        for k in 0..steps {
            let (c0, c1) = (&gains.feedback.values[k], &gains.feedback.values[k + 1]);
            let (k0, k1) = (&gains.kalman.values[k], &gains.kalman.values[k + 1]);
            for j in 0..substeps {
                let w = j as f64 / substeps as f64;
                let c = c0 + (c1 - c0) * w;
                let kal = k0 + (k1 - k0) * w;
                transitions.extend(flat(&substep_transition(sys, &c, &kal, h)));
            }
        }
        let node_feedback = gains.feedback.values.iter().flat_map(flat).collect();

        Ok(Stepper {
            n,
            m,
            d,
            steps,
            substeps,
            sqrt_h: h.sqrt(),
            times: gains.kalman.times(),
            transitions,
            node_feedback,
            weight: flat(&sys.terminal_weight),
            penalty: penalty.map(|p| flat(p.matrix())).unwrap_or_default(),
            mean0: mean0.as_slice().to_vec(),
            cov0_factor: flat(cov0_factor),
        })
    }

    /// Runs one path; `visit(node, plant, controller, actuator)` is called at
    /// every grid node including the initial one.
    fn run(
        &self,
        seed: u64,
        mut visit: impl FnMut(usize, &[f64], &[f64], &[f64]),
    ) -> Result<()> {
        let (n, m, d) = (self.n, self.m, self.d);
        let (n2, n3) = (2 * n, 3 * n);
        let width = n3 + m;
        let block = n3 * width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let zeta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut x0 = self.mean0.clone();
        mul_add(&mut x0, &self.cov0_factor, n, &zeta, 1.0);

        // state = (X, X̂₀, X̂, dw)
        let mut state = vec![0.0; width];
        state[..n].copy_from_slice(&x0);
        state[n..n2].copy_from_slice(&self.mean0);
        state[n2..n3].copy_from_slice(&self.mean0);
        let mut next = vec![0.0; n3];
        let mut plant = vec![0.0; n2];
        plant[..n].copy_from_slice(&x0);
        let mut u = vec![0.0; d];

        let mut report = |node: usize, state: &[f64], plant: &mut [f64], u: &mut [f64]| {
            plant[n..].copy_from_slice(&state[..n]);
            let ctrl = &state[n..n3];
            u.fill(0.0);
            mul_add(u, &self.node_feedback[node * d * n2..(node + 1) * d * n2], n2, ctrl, 1.0);
            visit(node, plant, ctrl, u);
        };

        report(0, &state, &mut plant, &mut u);
        for node in 0..self.steps {
            for j in 0..self.substeps {
                let s = node * self.substeps + j;
                for w in state[n3..].iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *w = self.sqrt_h * z;
                }
                let t = &self.transitions[s * block..(s + 1) * block];
                for (out, row) in next.iter_mut().zip(t.chunks_exact(width)) {
                    *out = row.iter().zip(&state).map(|(a, b)| a * b).sum();
                }
                state[..n3].copy_from_slice(&next);
            }
            if !state[..n3].iter().all(|v| v.is_finite()) {
                return Err(Error::PathDivergence {
                    seed,
                    step: (node + 1) * self.substeps,
                });
            }
            report(node + 1, &state, &mut plant, &mut u);
        }
        Ok(())
    }

    fn quadratic(&self, a: &[f64], v: &[f64]) -> f64 {
        let k = v.len();
        let mut acc = 0.0;
        for i in 0..k {
            for j in 0..k {
                acc += v[i] * a[i * k + j] * v[j];
            }
        }
        acc
    }
}

/// Simulates one path, returning the surrogate state at every grid node.
pub fn sample_path(
    sys: &SystemMatrices,
    gains: LoopGains<'_>,
    mean0: &DVector<f64>,
    cov0_factor: &DMatrix<f64>,
    seed: u64,
    substeps_per_node: usize,
) -> Result<Vec<SurrogateState>> {
    let stepper = Stepper::new(sys, gains, None, mean0, cov0_factor, substeps_per_node)?;
    let mut path = Vec::with_capacity(stepper.steps + 1);
    stepper.run(seed, |node, plant, ctrl, _| {
        path.push(SurrogateState {
            time: stepper.times[node],
            plant: DVector::from_column_slice(plant),
            controller: DVector::from_column_slice(ctrl),
        })
    })?;
    Ok(path)
}

/// Running sums over a block of paths.
#[derive(Clone)]
struct Accumulator {
    /// Per checkpoint: Σz, Σzzᵀ (row-major), Σ(x eᵀ)∘², Σe∘².
    sum_z: Vec<Vec<f64>>,
    sum_zz: Vec<Vec<f64>>,
    sum_cross_sq: Vec<Vec<f64>>,
    sum_err_sq: Vec<Vec<f64>>,
    scalars: [f64; 8],
}

impl Accumulator {
    fn new(checkpoints: usize, n2: usize) -> Self {
        let n4 = 2 * n2;
        Accumulator {
            sum_z: vec![vec![0.0; n4]; checkpoints],
            sum_zz: vec![vec![0.0; n4 * n4]; checkpoints],
            sum_cross_sq: vec![vec![0.0; n2 * n2]; checkpoints],
            sum_err_sq: vec![vec![0.0; n2]; checkpoints],
            scalars: [0.0; 8],
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        let pairs = [
            (&mut self.sum_z, &other.sum_z),
            (&mut self.sum_zz, &other.sum_zz),
            (&mut self.sum_cross_sq, &other.sum_cross_sq),
            (&mut self.sum_err_sq, &other.sum_err_sq),
        ];
        for (mine, theirs) in pairs {
            for (a, b) in mine.iter_mut().zip(theirs) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        for (x, y) in self.scalars.iter_mut().zip(&other.scalars) {
            *x += y;
        }
    }
}

/// Runs `paths` independent surrogate paths with seeds derived from
/// `config.base_seed` and accumulates their moments.
pub fn simulate_ensemble(
    sys: &SystemMatrices,
    gains: LoopGains<'_>,
    penalty: &ControlPenalty,
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
    config: &EnsembleConfig,
) -> Result<SampleMoments> {
    let seeds: Vec<u64> = (0..config.paths as u64)
        .map(|i| path_seed(config.base_seed, i))
        .collect();
    simulate_ensemble_with_seeds(sys, gains, penalty, mean0, cov0, config, &seeds)
}

/// As [`simulate_ensemble`] with explicit per-path seeds; `config.paths` and
/// `config.base_seed` are ignored.
pub fn simulate_ensemble_with_seeds(
    sys: &SystemMatrices,
    gains: LoopGains<'_>,
    penalty: &ControlPenalty,
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
    config: &EnsembleConfig,
    seeds: &[u64],
) -> Result<SampleMoments> {
    let paths = seeds.len();
    if paths < 2 {
        return Err(Error::Parameter(format!("need at least 2 paths, got {paths}")));
    }
    if cov0.shape() != (sys.n, sys.n) {
        return Err(Error::Dimension("cov0 must be n×n".into()));
    }
    let cov0_factor = linalg::psd_sqrt(cov0);
    let stepper = Stepper::new(sys, gains, Some(penalty), mean0, &cov0_factor, config.substeps_per_node)?;
    if let Some(&bad) = config.checkpoints.iter().find(|&&k| k > stepper.steps) {
        return Err(Error::Parameter(format!("checkpoint node {bad} beyond grid of {} steps", stepper.steps)));
    }
    let n = stepper.n;
    let n2 = 2 * n;
    let n4 = 2 * n2;
    let slot_of: Vec<Option<usize>> = (0..=stepper.steps)
        .map(|k| config.checkpoints.iter().position(|&c| c == k))
        .collect();

    let blocks: Vec<Accumulator> = seeds
        .par_chunks(BLOCK_PATHS)
        .map(|block| {
            let mut acc = Accumulator::new(config.checkpoints.len(), n2);
            let mut z = vec![0.0; n4];
            for &seed in block {
                let mut effort = 0.0;
                let mut last_power = 0.0;
                let mut prev_time = 0.0;
                let mut final_plant = vec![0.0; n2];
                let mut final_ctrl = vec![0.0; n2];
                stepper.run(seed, |node, plant, ctrl, u| {
                    let time = stepper.times[node];
                    let power = stepper.quadratic(&stepper.penalty, u);
                    if node > 0 {
                        effort += 0.5 * (time - prev_time) * (power + last_power);
                    }
                    last_power = power;
                    prev_time = time;
                    if node == stepper.steps {
                        final_plant.copy_from_slice(plant);
                        final_ctrl.copy_from_slice(ctrl);
                    }
                    // Each checkpoint node is recorded once even if listed twice.
                    let Some(slot) = slot_of[node] else { return };
                    z[..n2].copy_from_slice(plant);
                    z[n2..].copy_from_slice(ctrl);
                    for (s, v) in acc.sum_z[slot].iter_mut().zip(&z) {
                        *s += v;
                    }
                    let zz = &mut acc.sum_zz[slot];
                    for i in 0..n4 {
                        for j in 0..n4 {
                            zz[i * n4 + j] += z[i] * z[j];
                        }
                    }
                    for i in 0..n2 {
                        for j in 0..n2 {
                            let xe = ctrl[i] * (plant[j] - ctrl[j]);
                            acc.sum_cross_sq[slot][i * n2 + j] += xe * xe;
                        }
                        let e = plant[i] - ctrl[i];
                        acc.sum_err_sq[slot][i] += e * e;
                    }
                })?;
                let deviation = stepper.quadratic(&stepper.weight, &final_plant);
                let smoothing: f64 = (0..n)
                    .map(|i| (final_plant[i] - final_ctrl[i]).powi(2))
                    .sum();
                let cost = deviation + effort;
                for (slot, v) in [deviation, effort, cost, smoothing].into_iter().enumerate() {
                    acc.scalars[2 * slot] += v;
                    acc.scalars[2 * slot + 1] += v * v;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = Accumulator::new(config.checkpoints.len(), n2);
    for block in &blocks {
        total.merge(block);
    }
    Ok(finish(&total, paths, config, &stepper))
}

fn finish(acc: &Accumulator, paths: usize, config: &EnsembleConfig, stepper: &Stepper) -> SampleMoments {
    let n2 = 2 * stepper.n;
    let n4 = 2 * n2;
    let k = paths as f64;
    let se = |sum: f64, sum_sq: f64| Estimate::from_sums(sum, sum_sq, paths).std_error;

    let checkpoints = config
        .checkpoints
        .iter()
        .enumerate()
        .map(|(slot, &node)| {
            let mean = DVector::from_iterator(n4, acc.sum_z[slot].iter().map(|s| s / k));
            let second_moment = DMatrix::from_row_slice(n4, n4, &acc.sum_zz[slot]) / k;
            let plant_plant = second_moment.view((0, 0), (n2, n2));
            let plant_ctrl = second_moment.view((0, n2), (n2, n2));
            let ctrl_plant = second_moment.view((n2, 0), (n2, n2));
            let ctrl_ctrl = second_moment.view((n2, n2), (n2, n2)).into_owned();

            let error_mean = mean.rows(0, n2) - mean.rows(n2, n2);
            let error_mean_se = DVector::from_fn(n2, |i, _| {
                se(error_mean[i] * k, acc.sum_err_sq[slot][i])
            });
            let error_second_moment = plant_plant - plant_ctrl - ctrl_plant + &ctrl_ctrl;
            let cross_moment = ctrl_plant - &ctrl_ctrl;
            let cross_moment_se = DMatrix::from_fn(n2, n2, |i, j| {
                se(cross_moment[(i, j)] * k, acc.sum_cross_sq[slot][i * n2 + j])
            });
            CheckpointMoments {
                node,
                time: stepper.times[node],
                mean,
                second_moment,
                error_mean,
                error_mean_se,
                error_second_moment,
                controller_second_moment: ctrl_ctrl,
                cross_moment,
                cross_moment_se,
            }
        })
        .collect();

    let estimate = |slot: usize| Estimate::from_sums(acc.scalars[2 * slot], acc.scalars[2 * slot + 1], paths);
    SampleMoments {
        paths,
        substeps_per_node: stepper.substeps,
        checkpoints,
        deviation: estimate(0),
        effort: estimate(1),
        cost: estimate(2),
        smoothing_error: estimate(3),
    }
}

/// Residuals of one checkpoint against the ODE pipeline.
#[derive(Debug, Clone)]
pub struct CheckpointResidual {
    pub node: usize,
    pub time: f64,
    /// Largest `|Ê(x eᵀ)ᵢⱼ| / se` over the entries, and the entry's magnitude.
    pub cross_max: f64,
    pub cross_sigma: f64,
    /// Largest `|Ê(e)ᵢ| / se`, and the entry's magnitude.
    pub error_mean_max: f64,
    pub error_mean_sigma: f64,
    /// `‖Ê(e eᵀ) − P‖_F / ‖P‖_F`.
    pub error_covariance_rel: f64,
    /// `‖Ê(x xᵀ) − T‖_F / ‖T‖_F`.
    pub controller_moment_rel: f64,
}

impl CheckpointResidual {
    pub fn cross_within(&self, sigmas: f64) -> bool {
        self.cross_sigma <= sigmas
    }

    pub fn error_mean_within(&self, sigmas: f64) -> bool {
        self.error_mean_sigma <= sigmas
    }
}

#[derive(Debug, Clone)]
pub struct CrossMomentReport {
    pub checkpoints: Vec<CheckpointResidual>,
    /// Empirical `‖F(X(τ) − X₀)‖²` and the pipeline's `⟨Λ, S(τ)⟩`.
    pub deviation: Estimate,
    pub deviation_reference: f64,
    /// Empirical cost and the pipeline's `Φ(τ)`.
    pub cost: Estimate,
    pub cost_reference: f64,
    /// Empirical `‖X₀ − X̂₀(τ)‖²` and `tr P1(τ)`.
    pub smoothing_error: Estimate,
    pub smoothing_reference: f64,
}

fn relative_frobenius(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let diff = (estimate - reference).norm();
    let scale = reference.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Largest `|value| / se` over entries; `0/0` counts as zero.
fn max_sigma(values: &[f64], errors: &[f64]) -> (f64, f64) {
    values
        .iter()
        .zip(errors)
        .map(|(&v, &s)| {
            let z = if v == 0.0 { 0.0 } else { v.abs() / s };
            (v.abs(), z)
        })
        .fold((0.0, 0.0), |best, cur| if cur.1 > best.1 || (cur.1 == best.1 && cur.0 > best.0) { cur } else { best })
}

/// Compares ensemble moments with the filter and closed-loop solutions on
/// the same grid.
pub fn cross_moment_check(
    moments: &SampleMoments,
    closed_loop: &ClosedLoopSolution,
    filter: &FilterSolution,
) -> CrossMomentReport {
    let checkpoints = moments
        .checkpoints
        .iter()
        .map(|cp| {
            let (cross_max, cross_sigma) = max_sigma(cp.cross_moment.as_slice(), cp.cross_moment_se.as_slice());
            let (error_mean_max, error_mean_sigma) = max_sigma(cp.error_mean.as_slice(), cp.error_mean_se.as_slice());
            CheckpointResidual {
                node: cp.node,
                time: cp.time,
                cross_max,
                cross_sigma,
                error_mean_max,
                error_mean_sigma,
                error_covariance_rel: relative_frobenius(&cp.error_second_moment, &filter.assembled(cp.node)),
                controller_moment_rel: relative_frobenius(
                    &cp.controller_second_moment,
                    &closed_loop.second_moment.values[cp.node],
                ),
            }
        })
        .collect();
    let last = filter.blocks.steps();
    CrossMomentReport {
        checkpoints,
        deviation: moments.deviation,
        deviation_reference: *closed_loop.deviation.last().expect("non-empty grid"),
        cost: moments.cost,
        cost_reference: closed_loop.final_cost(),
        smoothing_error: moments.smoothing_error,
        smoothing_reference: filter.blocks.values[last].first.trace(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::derive_system_matrices;
    use crate::scenarios;

    #[test]
    fn splitmix_known_values() {
        // First outputs of the reference splitmix64 generator seeded with 0.
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(splitmix64(0x9e37_79b9_7f4a_7c15), 0x6e78_9e6a_a1b9_65f4);
        assert_eq!(path_seed(0, 0), splitmix64(0));
    }

    #[test]
    fn checkpoints_are_evenly_spaced() {
        assert_eq!(evenly_spaced_checkpoints(10_000, 10), (1..=10).map(|j| j * 1000).collect::<Vec<_>>());
        assert_eq!(evenly_spaced_checkpoints(3, 10), vec![0, 1, 2, 3]);
    }

    #[test]
    fn mul_add_row_major() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [1.0, 1.0];
        mul_add(&mut out, &a, 3, &[1.0, 0.0, -1.0], 2.0);
        assert_eq!(out, [-3.0, -3.0]);
    }

    #[test]
    fn estimate_of_constant_sample() {
        let e = Estimate::from_sums(6.0, 12.0, 3);
        assert_eq!(e.mean, 2.0);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(e.z_score(2.0), 0.0);
    }

    #[test]
    fn plant_reference_half_is_frozen() {
        let spec = scenarios::reference();
        let sys = derive_system_matrices(&spec).unwrap();
        let kalman = TimeGrid {
            t0: 0.0,
            t1: 1.0,
            values: vec![DMatrix::from_element(4, 1, 0.3); 11],
        };
        let feedback = TimeGrid {
            t0: 0.0,
            t1: 1.0,
            values: vec![DMatrix::from_row_slice(1, 4, &[0.5, 0.0, -0.5, 0.0]); 11],
        };
        let gains = LoopGains { kalman: &kalman, feedback: &feedback };
        let factor = linalg::psd_sqrt(&spec.cov0);
        let path = sample_path(&sys, gains, &spec.mean0, &factor, 17, 4).unwrap();
        assert_eq!(path.len(), 11);
        for state in &path {
            assert_eq!(state.plant.rows(0, 2), path[0].plant.rows(0, 2));
        }
        assert_eq!(path[0].controller.as_slice(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(path, sample_path(&sys, gains, &spec.mean0, &factor, 17, 4).unwrap());
        assert_ne!(path, sample_path(&sys, gains, &spec.mean0, &factor, 18, 4).unwrap());
    }

    #[test]
    fn diverging_path_reports_seed() {
        let spec = scenarios::reference();
        let sys = derive_system_matrices(&spec).unwrap();
        let kalman = TimeGrid { t0: 0.0, t1: 1.0, values: vec![DMatrix::zeros(4, 1); 3] };
        let feedback = TimeGrid {
            t0: 0.0,
            t1: 1.0,
            values: vec![DMatrix::from_row_slice(1, 4, &[0.0, 0.0, f64::INFINITY, 0.0]); 3],
        };
        let gains = LoopGains { kalman: &kalman, feedback: &feedback };
        let err = sample_path(&sys, gains, &spec.mean0, &DMatrix::zeros(2, 2), 42, 2).unwrap_err();
        assert!(matches!(err, Error::PathDivergence { seed: 42, step: 2 }));
    }

    #[test]
    fn too_few_paths_rejected() {
        let spec = scenarios::reference();
        let sys = derive_system_matrices(&spec).unwrap();
        let pen = ControlPenalty::new(spec.control_penalty.clone()).unwrap();
        let grid = TimeGrid { t0: 0.0, t1: 1.0, values: vec![DMatrix::zeros(4, 1); 2] };
        let fb = TimeGrid { t0: 0.0, t1: 1.0, values: vec![DMatrix::zeros(1, 4); 2] };
        let config = EnsembleConfig { paths: 1, base_seed: 0, substeps_per_node: 1, checkpoints: vec![1] };
        let gains = LoopGains { kalman: &grid, feedback: &fb };
        assert!(matches!(
            simulate_ensemble(&sys, gains, &pen, &spec.mean0, &spec.cov0, &config),
            Err(Error::Parameter(_))
        ));
    }
}
