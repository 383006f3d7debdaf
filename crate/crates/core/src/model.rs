//! Plant, measurement and augmented-system matrices derived from the physical
//! parameters of an open quantum harmonic oscillator memory.
//!
//! The plant has `n` variables (positions/momenta in pairs) coupled to `m`
//! vacuum field channels. A classical controller acts through `d` actuator
//! channels on the Hamiltonian and observes `r` commuting quadratures of the
//! output field. The augmented state `(X₀; X(t))` carries a frozen copy of the
//! initial plant variables, which is what makes initial-point smoothing a
//! filtering problem.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative threshold for symmetry, `DJDᵀ = 0`, PSD and rank checks.
pub const VALIDATION_TOL: f64 = 1e-10;

/// User-supplied physical parameters of a memory scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    /// Number of plant variables (even).
    pub n: usize,
    /// Number of field channels (even).
    pub m: usize,
    /// Number of actuator channels; zero disables control.
    pub d: usize,
    /// Number of observation channels, `r ≤ m/2`.
    pub r: usize,
    /// Number of plant variables of interest, `s ≤ n`.
    pub s: usize,
    /// Energy matrix `R` (n×n, symmetric).
    pub energy: DMatrix<f64>,
    /// Plant-field coupling `M` (m×n).
    pub field_coupling: DMatrix<f64>,
    /// Plant-controller coupling `N` (d×n).
    pub control_coupling: DMatrix<f64>,
    /// Measurement matrix `D` (r×m).
    pub measurement: DMatrix<f64>,
    /// Selector `F` (s×n, full row rank) of the variables to be preserved.
    pub selector: DMatrix<f64>,
    /// Control penalty `Π` (d×d, symmetric positive definite).
    pub control_penalty: DMatrix<f64>,
    /// Mean of the initial plant variables.
    pub mean0: DVector<f64>,
    /// Real part of the covariance of the initial plant variables.
    pub cov0: DMatrix<f64>,
    /// Time horizon `τ`.
    pub horizon: f64,
    /// Number of uniform grid intervals on `[0, τ]`.
    pub steps: usize,
}

/// Structure, dynamics and augmented matrices of the closed-loop moment model.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub n: usize,
    /// CCR matrix `Θ = ½ I_{n/2} ⊗ [[0,1],[-1,0]]`.
    pub ccr: DMatrix<f64>,
    /// Imaginary part of the field Ito matrix, `J = I_{m/2} ⊗ [[0,1],[-1,0]]`.
    pub field_ccr: DMatrix<f64>,
    /// `A = 2Θ(R + MᵀJM)`.
    pub drift: DMatrix<f64>,
    /// `B = 2ΘMᵀ`.
    pub noise: DMatrix<f64>,
    /// `E = 2ΘNᵀ`.
    pub actuator: DMatrix<f64>,
    /// `C = 2DJM`.
    pub observation: DMatrix<f64>,
    /// Measurement matrix `D`.
    pub measurement: DMatrix<f64>,
    /// Observation diffusion `G = DDᵀ`.
    pub obs_diffusion: DMatrix<f64>,
    /// `G⁻¹`, computed once since `G` is constant.
    pub obs_diffusion_inv: DMatrix<f64>,
    /// `Σ = FᵀF`.
    pub weight: DMatrix<f64>,
    /// `Λ = [[1,-1],[-1,1]] ⊗ Σ`.
    pub terminal_weight: DMatrix<f64>,
    /// `[[0, 0], [0, A]]`.
    pub aug_drift: DMatrix<f64>,
    /// `[0; B]`.
    pub aug_noise: DMatrix<f64>,
    /// `[0, C]`.
    pub aug_observation: DMatrix<f64>,
    /// `[0; E]`.
    pub aug_actuator: DMatrix<f64>,
}

impl SystemMatrices {
    pub fn actuator_channels(&self) -> usize {
        self.actuator.ncols()
    }

    pub fn observation_channels(&self) -> usize {
        self.observation.nrows()
    }

    pub fn field_channels(&self) -> usize {
        self.noise.ncols()
    }
}

/// Symmetric positive-definite control penalty together with its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPenalty {
    pi: DMatrix<f64>,
    pi_inv: DMatrix<f64>,
}

impl ControlPenalty {
    pub fn new(pi: DMatrix<f64>) -> Result<Self> {
        if !pi.is_square() {
            return Err(Error::Dimension(format!(
                "control penalty must be square, got {}×{}",
                pi.nrows(),
                pi.ncols()
            )));
        }
        let pi_inv = linalg::spd_inverse(&pi)
            .ok_or_else(|| Error::Parameter("control penalty is not positive definite".into()))?;
        Ok(Self { pi, pi_inv })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.pi
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.pi_inv
    }

    pub fn dim(&self) -> usize {
        self.pi.nrows()
    }
}

/// The invariant a [`Violation`] refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Dimension,
    NonFinite,
    NotSymmetric,
    NotPositiveDefinite,
    NotPositiveSemidefinite,
    RankDeficient,
    NonCommutingObservations,
    Horizon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Name of the offending quantity, e.g. `"DJDᵀ"` or `"Pi"`.
    pub quantity: String,
    /// Measured residual (or offending value) behind the violation.
    pub residual: f64,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} [{}]: {} (residual {:e})",
            self.kind, self.quantity, self.message, self.residual
        )
    }
}

/// Outcome of [`validate_spec`]; empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind, quantity: &str) -> bool {
        self.violations
            .iter()
            .any(|v| v.kind == kind && v.quantity == quantity)
    }

    fn push(
        &mut self,
        kind: ViolationKind,
        quantity: &str,
        residual: f64,
        message: impl Into<String>,
    ) {
        self.violations.push(Violation {
            kind,
            quantity: quantity.to_string(),
            residual,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

fn symplectic_unit() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
}

/// Returns the plant CCR matrix `Θ` (n×n) and the field CCR matrix `J` (m×m).
pub fn build_structure_matrices(n: usize, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    for (name, k) in [("n", n), ("m", m)] {
        if k == 0 || k % 2 != 0 {
            return Err(Error::Dimension(format!(
                "{name} must be even and positive, got {k}"
            )));
        }
    }
    let unit = symplectic_unit();
    let theta = linalg::kron(&DMatrix::identity(n / 2, n / 2), &unit) * 0.5;
    let j = linalg::kron(&DMatrix::identity(m / 2, m / 2), &unit);
    Ok((theta, j))
}

/// Checks every structural invariant of a scenario. Never fails: each problem
/// becomes a report entry.
pub fn validate_spec(spec: &ScenarioSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    let ScenarioSpec { n, m, d, r, s, .. } = *spec;

    for (name, k) in [("n", n), ("m", m)] {
        if k == 0 || k % 2 != 0 {
            report.push(
                ViolationKind::Dimension,
                name,
                k as f64,
                format!("{name} must be even and positive"),
            );
        }
    }
    if r == 0 || 2 * r > m {
        report.push(
            ViolationKind::Dimension,
            "r",
            r as f64,
            format!("need 1 ≤ r ≤ m/2 = {}", m / 2),
        );
    }
    if s == 0 || s > n {
        report.push(
            ViolationKind::Dimension,
            "s",
            s as f64,
            format!("need 1 ≤ s ≤ n = {n}"),
        );
    }
    if !(spec.horizon.is_finite() && spec.horizon > 0.0) {
        report.push(
            ViolationKind::Horizon,
            "tau",
            spec.horizon,
            "horizon must be positive and finite",
        );
    }
    if spec.steps == 0 {
        report.push(ViolationKind::Horizon, "steps", 0.0, "steps must be ≥ 1");
    }

    let shapes: [(&str, &DMatrix<f64>, (usize, usize)); 7] = [
        ("R", &spec.energy, (n, n)),
        ("M", &spec.field_coupling, (m, n)),
        ("N", &spec.control_coupling, (d, n)),
        ("D", &spec.measurement, (r, m)),
        ("F", &spec.selector, (s, n)),
        ("Pi", &spec.control_penalty, (d, d)),
        ("cov0", &spec.cov0, (n, n)),
    ];
    let mut shapes_ok = true;
    for (name, mat, expected) in shapes {
        if mat.shape() != expected {
            shapes_ok = false;
            report.push(
                ViolationKind::Dimension,
                name,
                f64::NAN,
                format!("expected {}×{}, got {}×{}", expected.0, expected.1, mat.nrows(), mat.ncols()),
            );
        } else if mat.iter().any(|x| !x.is_finite()) {
            shapes_ok = false;
            report.push(ViolationKind::NonFinite, name, f64::NAN, "non-finite entry");
        }
    }
    if spec.mean0.len() != n {
        shapes_ok = false;
        report.push(
            ViolationKind::Dimension,
            "mean0",
            spec.mean0.len() as f64,
            format!("expected length {n}"),
        );
    } else if spec.mean0.iter().any(|x| !x.is_finite()) {
        shapes_ok = false;
        report.push(ViolationKind::NonFinite, "mean0", f64::NAN, "non-finite entry");
    }
    if !shapes_ok {
        return report;
    }

    for (name, mat) in [("R", &spec.energy), ("Pi", &spec.control_penalty), ("cov0", &spec.cov0)] {
        let asym = linalg::asymmetry(mat);
        if asym > VALIDATION_TOL * linalg::max_abs(mat) {
            report.push(ViolationKind::NotSymmetric, name, asym, "matrix is not symmetric");
        }
    }

    if d > 0 {
        let ev = linalg::sym_eigenvalues(&spec.control_penalty);
        let (lo, hi) = (ev[0], ev[ev.len() - 1]);
        if !(lo > VALIDATION_TOL * hi.abs().max(f64::MIN_POSITIVE)) {
            report.push(
                ViolationKind::NotPositiveDefinite,
                "Pi",
                lo,
                "Pi not positive-definite",
            );
        }
    }

    let cov_min = linalg::min_sym_eigenvalue(&spec.cov0);
    if cov_min < -VALIDATION_TOL * linalg::max_abs(&spec.cov0).max(1.0) {
        report.push(
            ViolationKind::NotPositiveSemidefinite,
            "cov0",
            cov_min,
            "cov0 not positive-semidefinite",
        );
    }

    let rank_f = linalg::numerical_rank(&spec.selector, VALIDATION_TOL);
    if rank_f != s {
        report.push(
            ViolationKind::RankDeficient,
            "F",
            rank_f as f64,
            format!("rank(F) = {rank_f}, expected {s}"),
        );
    }
    let rank_d = linalg::numerical_rank(&spec.measurement, VALIDATION_TOL);
    if rank_d != r {
        report.push(
            ViolationKind::RankDeficient,
            "D",
            rank_d as f64,
            format!("rank(D) = {rank_d}, expected {r}"),
        );
    }

    if let Ok((_, j)) = build_structure_matrices(n, m) {
        let d_mat = &spec.measurement;
        let djd = d_mat * &j * d_mat.transpose();
        let residual = linalg::max_abs(&djd);
        let d_norm = linalg::singular_values(d_mat).first().copied().unwrap_or(0.0);
        if residual > VALIDATION_TOL * d_norm * d_norm {
            report.push(
                ViolationKind::NonCommutingObservations,
                "DJDᵀ",
                residual,
                "DJDᵀ ≠ 0: observation channels do not commute",
            );
        }
    }

    report
}

/// Validates `spec` and derives all system matrices.
pub fn derive_system_matrices(spec: &ScenarioSpec) -> Result<SystemMatrices> {
    let report = validate_spec(spec);
    if !report.is_valid() {
        return Err(Error::InvalidScenario(report));
    }
    derive_system_matrices_unchecked(spec)
}

/// Derives the system matrices without validating the scenario first.
///
/// Only the shapes needed for the arithmetic are checked. Used to probe how
/// the derived quantities react to invalid inputs (e.g. a nonsymmetric `R`).
pub fn derive_system_matrices_unchecked(spec: &ScenarioSpec) -> Result<SystemMatrices> {
    let n = spec.n;
    let (theta, j) = build_structure_matrices(n, spec.m)?;
    let m_mat = &spec.field_coupling;
    let d_mat = &spec.measurement;
    if m_mat.shape() != (spec.m, n)
        || spec.energy.shape() != (n, n)
        || spec.control_coupling.ncols() != n
        || d_mat.ncols() != spec.m
        || spec.selector.ncols() != n
    {
        return Err(Error::Dimension("scenario matrix shapes are inconsistent".into()));
    }

    let two_theta = &theta * 2.0;
    let drift = &two_theta * (&spec.energy + m_mat.transpose() * &j * m_mat);
    let noise = &two_theta * m_mat.transpose();
    let actuator = &two_theta * spec.control_coupling.transpose();
    let observation = d_mat * &j * m_mat * 2.0;
    let obs_diffusion = d_mat * d_mat.transpose();
    let obs_diffusion_inv = linalg::spd_inverse(&obs_diffusion)
        .ok_or_else(|| Error::Parameter("observation diffusion DDᵀ is singular".into()))?;
    let weight = spec.selector.transpose() * &spec.selector;
    let pattern = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
    let terminal_weight = linalg::kron(&pattern, &weight);

    let zn = DMatrix::zeros(n, n);
    let aug_drift = linalg::block2(&zn, &zn, &zn, &drift);
    let aug_noise = linalg::vstack(&DMatrix::zeros(n, noise.ncols()), &noise);
    let aug_observation = linalg::hstack(&DMatrix::zeros(observation.nrows(), n), &observation);
    let aug_actuator = linalg::vstack(&DMatrix::zeros(n, actuator.ncols()), &actuator);

    Ok(SystemMatrices {
        n,
        ccr: theta,
        field_ccr: j,
        drift,
        noise,
        actuator,
        observation,
        measurement: d_mat.clone(),
        obs_diffusion,
        obs_diffusion_inv,
        weight,
        terminal_weight,
        aug_drift,
        aug_noise,
        aug_observation,
        aug_actuator,
    })
}

/// `AΘ + ΘAᵀ + BJBᵀ`, which vanishes for any physically realizable plant.
pub fn physical_realizability_residual(sys: &SystemMatrices) -> DMatrix<f64> {
    &sys.drift * &sys.ccr
        + &sys.ccr * sys.drift.transpose()
        + &sys.noise * &sys.field_ccr * sys.noise.transpose()
}
