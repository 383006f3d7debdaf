use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use log::{info, warn};
use qmem_core::closedloop::{
    self, decoherence_time, default_phi_star, initial_second_moment, min_cost_identity, relative_variation,
    ClosedLoopSolution,
};
use qmem_core::control::{solve_control, ControlSolution};
use qmem_core::filtering::{solve_filter, FilterSolution};
use qmem_core::linalg;
use qmem_core::model::{
    derive_system_matrices, physical_realizability_residual, validate_spec, ControlPenalty, ScenarioSpec,
    SystemMatrices, ValidationReport,
};
use qmem_core::montecarlo::{
    cross_moment_check, evenly_spaced_checkpoints, simulate_ensemble, CrossMomentReport, EnsembleConfig, Estimate,
    LoopGains, DEFAULT_SUBSTEPS,
};
use serde::Serialize;

use crate::output;
use crate::scenario::load_scenario;

pub const DEFAULT_PATHS: usize = 10_000;
pub const DEFAULT_SEED: u64 = 20_240_601;
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const MONTE_CARLO_CHECKPOINTS: usize = 10;

/// Error-level thresholds: a breach makes the run exit nonzero.
pub const REALIZABILITY_TOL: f64 = 1e-12;
pub const BLOCK_FULL_TOL: f64 = 1e-8;
pub const COST_IDENTITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Check the scenario and report violations.
    Validate,
    /// Solve the filtering/smoothing Riccati equation.
    Filter,
    /// Solve the control Riccati equation.
    Control,
    /// Close the loop and propagate second moments and cost.
    Simulate,
    /// Cross-check the closed loop against a Monte Carlo ensemble.
    Montecarlo,
    /// Compute the decoherence time of the closed loop.
    Decoherence,
    /// Every stage.
    Full,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub scenario: PathBuf,
    pub out: PathBuf,
    pub steps: Option<usize>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub phi_star: Option<f64>,
}

impl RunConfig {
    pub fn new(command: Command, scenario: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            command,
            scenario: scenario.into(),
            out: out.into(),
            steps: None,
            paths: None,
            seed: None,
            epsilon: None,
            phi_star: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ScenarioSummary {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub r: usize,
    pub s: usize,
    pub tau: f64,
    pub steps: usize,
}

#[derive(Debug, Serialize)]
pub struct ViolationSummary {
    pub kind: String,
    pub quantity: String,
    pub residual: f64,
    pub message: String,
}

#[derive(Debug, Serialize)]
pub struct ValidationSummary {
    pub valid: bool,
    pub violations: Vec<ViolationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub realizability_residual: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct FilterSummary {
    pub block_full_deviation: f64,
    pub min_eigenvalue: f64,
    /// `tr P1(τ)`, mean-square smoothing error of the initial variables.
    pub final_smoothing_error: f64,
}

#[derive(Debug, Serialize)]
pub struct ControlSummary {
    pub block_full_deviation: f64,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Serialize)]
pub struct ClosedLoopSummary {
    pub final_cost: f64,
    pub final_deviation: f64,
    pub min_cost_identity: f64,
    /// `|Φ(τ) − identity| / (1 + Φ(τ))`.
    pub cost_identity_residual: f64,
    pub hamiltonian_variation: f64,
    pub hamiltonian_balance_variation: f64,
}

#[derive(Debug, Serialize)]
pub struct DecoherenceSummary {
    pub epsilon: f64,
    pub phi_star: f64,
    pub threshold: f64,
    pub time: Option<f64>,
    pub status: &'static str,
}

#[derive(Debug, Serialize)]
pub struct EstimateSummary {
    pub mean: f64,
    pub std_error: f64,
    pub reference: f64,
    pub z_score: f64,
}

impl EstimateSummary {
    fn new(estimate: Estimate, reference: f64) -> Self {
        EstimateSummary {
            mean: estimate.mean,
            std_error: estimate.std_error,
            reference,
            z_score: estimate.z_score(reference),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CheckpointSummary {
    pub node: usize,
    pub t: f64,
    pub cross_max: f64,
    pub cross_sigma: f64,
    pub error_mean_max: f64,
    pub error_mean_sigma: f64,
    pub error_covariance_rel: f64,
    pub controller_moment_rel: f64,
}

#[derive(Debug, Serialize)]
pub struct MonteCarloSummary {
    pub paths: usize,
    pub seed: u64,
    pub substeps_per_node: usize,
    pub deviation: EstimateSummary,
    pub cost: EstimateSummary,
    pub smoothing_error: EstimateSummary,
    pub checkpoints: Vec<CheckpointSummary>,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub command: Command,
    pub scenario: ScenarioSummary,
    pub validation: ValidationSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closed_loop: Option<ClosedLoopSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoherence: Option<DecoherenceSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub montecarlo: Option<MonteCarloSummary>,
    /// Error-level invariant breaches; nonempty means a nonzero exit status.
    pub breaches: Vec<String>,
}

impl Summary {
    pub fn succeeded(&self) -> bool {
        self.breaches.is_empty()
    }
}

fn validation_summary(report: &ValidationReport) -> ValidationSummary {
    ValidationSummary {
        valid: report.is_valid(),
        violations: report
            .violations
            .iter()
            .map(|v| ViolationSummary {
                kind: format!("{:?}", v.kind),
                quantity: v.quantity.clone(),
                residual: v.residual,
                message: v.message.clone(),
            })
            .collect(),
        realizability_residual: None,
    }
}

fn scenario_summary(spec: &ScenarioSpec) -> ScenarioSummary {
    ScenarioSummary {
        n: spec.n,
        m: spec.m,
        d: spec.d,
        r: spec.r,
        s: spec.s,
        tau: spec.horizon,
        steps: spec.steps,
    }
}

/// Realizability residual scaled by the size of the terms it cancels.
fn realizability_check(sys: &SystemMatrices) -> (f64, bool) {
    let residual = linalg::max_abs(&physical_realizability_residual(sys));
    let scale = linalg::max_abs(&(&sys.drift * &sys.ccr))
        .max(linalg::max_abs(&(&sys.noise * &sys.field_ccr * sys.noise.transpose())))
        .max(1.0);
    (residual, residual <= REALIZABILITY_TOL * scale)
}

fn solve_stages(
    command: Command,
    spec: &ScenarioSpec,
    sys: &SystemMatrices,
    penalty: &ControlPenalty,
) -> Result<(Option<FilterSolution>, Option<ControlSolution>, Option<ClosedLoopSolution>)> {
    let needs_filter = command != Command::Control;
    let needs_control = command != Command::Filter;
    let filter = needs_filter
        .then(|| solve_filter(sys, &spec.cov0, spec.horizon, spec.steps))
        .transpose()
        .context("filter stage")?;
    let control = needs_control
        .then(|| solve_control(sys, penalty, spec.horizon, spec.steps))
        .transpose()
        .context("control stage")?;
    let closed_loop = match (&filter, &control) {
        (Some(f), Some(c)) => Some(
            closedloop::solve_closed_loop(sys, f, c, penalty, &spec.mean0).context("closed-loop stage")?,
        ),
        _ => None,
    };
    Ok((filter, control, closed_loop))
}

/// Runs `config.command`, writing stage CSVs and `summary.json` into
/// `config.out`. Hard errors are returned; invariant breaches are listed in
/// the summary.
pub fn run(config: &RunConfig) -> Result<Summary> {
    let mut spec = load_scenario(&config.scenario)
        .with_context(|| format!("loading scenario {}", config.scenario.display()))?;
    if let Some(steps) = config.steps {
        spec.steps = steps;
    }
    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    let summary_path = config.out.join("summary.json");

    let report = validate_spec(&spec);
    let mut summary = Summary {
        command: config.command,
        scenario: scenario_summary(&spec),
        validation: validation_summary(&report),
        filter: None,
        control: None,
        closed_loop: None,
        decoherence: None,
        montecarlo: None,
        breaches: Vec::new(),
    };
    if !report.is_valid() {
        summary.breaches.push("scenario failed validation".into());
        output::write_summary(&summary_path, &summary)?;
        if config.command == Command::Validate {
            return Ok(summary);
        }
        bail!("invalid scenario:\n{report}");
    }

    let sys = derive_system_matrices(&spec)?;
    let (residual, realizable) = realizability_check(&sys);
    summary.validation.realizability_residual = Some(residual);
    if !realizable {
        summary.breaches.push(format!("physical realizability residual {residual:e}"));
    }
    if config.command == Command::Validate {
        output::write_summary(&summary_path, &summary)?;
        return Ok(summary);
    }

    let penalty = ControlPenalty::new(spec.control_penalty.clone())?;
    info!("solving stages for {:?} on {} steps", config.command, spec.steps);
    let (filter, control, closed_loop) = solve_stages(config.command, &spec, &sys, &penalty)?;

    if let Some(filter) = &filter {
        let deviation = filter.block_full_deviation();
        if deviation > BLOCK_FULL_TOL {
            summary.breaches.push(format!("filter block/full deviation {deviation:e}"));
        }
        summary.filter = Some(FilterSummary {
            block_full_deviation: deviation,
            min_eigenvalue: filter.min_eigenvalue,
            final_smoothing_error: filter.blocks.last().first.trace(),
        });
        output::write_filter_csv(&config.out.join("filter.csv"), filter)?;
    }
    if let Some(control) = &control {
        let deviation = control.block_full_deviation();
        if deviation > BLOCK_FULL_TOL {
            summary.breaches.push(format!("control block/full deviation {deviation:e}"));
        }
        summary.control = Some(ControlSummary {
            block_full_deviation: deviation,
            min_eigenvalue: control.min_eigenvalue,
        });
        output::write_control_csv(&config.out.join("control.csv"), control)?;
    }

    if let (Some(filter), Some(control), Some(cl)) = (&filter, &control, &closed_loop) {
        closed_loop_stage(config, &spec, &sys, &penalty, (filter, control, cl), &mut summary)?;
    }

    for breach in &summary.breaches {
        warn!("{breach}");
    }
    output::write_summary(&summary_path, &summary)?;
    Ok(summary)
}

fn closed_loop_stage(
    config: &RunConfig,
    spec: &ScenarioSpec,
    sys: &SystemMatrices,
    penalty: &ControlPenalty,
    (filter, control, cl): (&FilterSolution, &ControlSolution, &ClosedLoopSolution),
    summary: &mut Summary,
) -> Result<()> {
    let times = cl.times();
    let phi = cl.final_cost();
    let identity = min_cost_identity(
        filter,
        control,
        &initial_second_moment(&spec.mean0),
        &sys.terminal_weight,
        &sys.obs_diffusion,
    );
    let identity_residual = (phi - identity).abs() / (1.0 + phi);
    if identity_residual > COST_IDENTITY_TOL {
        summary.breaches.push(format!("cost identity residual {identity_residual:e}"));
    }
    summary.closed_loop = Some(ClosedLoopSummary {
        final_cost: phi,
        final_deviation: *cl.deviation.last().expect("non-empty grid"),
        min_cost_identity: identity,
        cost_identity_residual: identity_residual,
        hamiltonian_variation: relative_variation(&times, &cl.hamiltonian),
        hamiltonian_balance_variation: relative_variation(&times, &cl.hamiltonian_balance),
    });
    output::write_closed_loop_csv(&config.out.join("closedloop.csv"), cl)?;

    if matches!(config.command, Command::Decoherence | Command::Full) {
        let epsilon = config.epsilon.unwrap_or(DEFAULT_EPSILON);
        let phi_star = config
            .phi_star
            .unwrap_or_else(|| default_phi_star(sys, filter, &spec.mean0));
        let time = decoherence_time(&times, &cl.running_cost, epsilon, phi_star).context("decoherence stage")?;
        summary.decoherence = Some(DecoherenceSummary {
            epsilon,
            phi_star,
            threshold: epsilon * phi_star,
            time,
            status: if time.is_some() { "reached" } else { "not reached within horizon" },
        });
    }

    if matches!(config.command, Command::Montecarlo | Command::Full) {
        let ensemble = EnsembleConfig {
            paths: config.paths.unwrap_or(DEFAULT_PATHS),
            base_seed: config.seed.unwrap_or(DEFAULT_SEED),
            substeps_per_node: DEFAULT_SUBSTEPS,
            checkpoints: evenly_spaced_checkpoints(spec.steps, MONTE_CARLO_CHECKPOINTS),
        };
        info!("simulating {} surrogate paths", ensemble.paths);
        let gains = LoopGains {
            kalman: &filter.gain,
            feedback: &control.gain,
        };
        let moments = simulate_ensemble(sys, gains, penalty, &spec.mean0, &spec.cov0, &ensemble)
            .context("Monte Carlo stage")?;
        let report = cross_moment_check(&moments, cl, filter);
        output::write_montecarlo_csv(&config.out.join("montecarlo.csv"), &report)?;
        summary.montecarlo = Some(monte_carlo_summary(&ensemble, &report));
    }
    Ok(())
}

fn monte_carlo_summary(config: &EnsembleConfig, report: &CrossMomentReport) -> MonteCarloSummary {
    MonteCarloSummary {
        paths: config.paths,
        seed: config.base_seed,
        substeps_per_node: config.substeps_per_node,
        deviation: EstimateSummary::new(report.deviation, report.deviation_reference),
        cost: EstimateSummary::new(report.cost, report.cost_reference),
        smoothing_error: EstimateSummary::new(report.smoothing_error, report.smoothing_reference),
        checkpoints: report
            .checkpoints
            .iter()
            .map(|cp| CheckpointSummary {
                node: cp.node,
                t: cp.time,
                cross_max: cp.cross_max,
                cross_sigma: cp.cross_sigma,
                error_mean_max: cp.error_mean_max,
                error_mean_sigma: cp.error_mean_sigma,
                error_covariance_rel: cp.error_covariance_rel,
                controller_moment_rel: cp.controller_moment_rel,
            })
            .collect(),
    }
}
