//! Gauss–Newton trust-region solver with a scaled dogleg step.

use std::time::Instant;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::banded::{BlockFactorization, BlockPentaMatrix};
use crate::error::{Error, Result};
use crate::problem::{ConstraintMode, TrajOptProblem, TrajectoryVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub initial_radius: f64,
    pub max_radius: f64,
    /// Accept a step when the trust ratio exceeds this.
    pub eta: f64,
    pub cost_reduction_tolerance: f64,
    pub gradient_tolerance: f64,
    pub radius_floor: f64,
    pub scaling: bool,
    pub max_factorization_failures: usize,
    /// Weight of an extra `½ μ ‖h‖²` term in the merit function. Zero keeps
    /// the plain `L + hᵀλ` merit.
    pub merit_penalty: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_radius: 0.1,
            max_radius: 100.0,
            eta: 0.0,
            cost_reduction_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            radius_floor: 1e-12,
            scaling: true,
            max_factorization_failures: 5,
            merit_penalty: 0.0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::InvalidParameter {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(0.0..0.25).contains(&self.eta) {
            return bad("eta", "must lie in [0, 0.25)");
        }
        if !(self.max_radius > 0.0) {
            return bad("max_radius", "must be > 0");
        }
        if !(self.initial_radius > 0.0 && self.initial_radius <= self.max_radius) {
            return bad("initial_radius", "must lie in (0, max_radius]");
        }
        for (field, v) in [
            ("cost_reduction_tolerance", self.cost_reduction_tolerance),
            ("gradient_tolerance", self.gradient_tolerance),
            ("radius_floor", self.radius_floor),
        ] {
            if !(v > 0.0) {
                return bad(field, "must be > 0");
            }
        }
        if !(self.merit_penalty >= 0.0) {
            return bad("merit_penalty", "must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    FullNewton,
    DoglegInterpolation,
    ScaledCauchy,
    /// Scaled gradient step taken after a failed factorization.
    GradientFallback,
    /// No step was computed this iteration.
    None,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::FullNewton => "full_newton",
            StepKind::DoglegInterpolation => "dogleg_interpolation",
            StepKind::ScaledCauchy => "scaled_cauchy",
            StepKind::GradientFallback => "gradient_fallback",
            StepKind::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Converged,
    MaxIterations,
    TrustRadiusFloor,
    FactorizationFailureExhausted,
}

impl TerminationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminationReason::Converged => "converged",
            TerminationReason::MaxIterations => "max_iterations",
            TerminationReason::TrustRadiusFloor => "trust_radius_floor",
            TerminationReason::FactorizationFailureExhausted => "factorization_failure_exhausted",
        }
    }
}

/// State of the iterate at the start of an iteration and what happened to
/// the step proposed from it.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    /// `‖h‖²`
    pub constraint_violation: f64,
    /// Merit value (`L + hᵀλ` in multiplier mode, `L` otherwise).
    pub merit: f64,
    /// Merit at the trial point under the same multipliers as `merit`; NaN
    /// when no trial point was evaluated.
    pub trial_merit: f64,
    /// `‖g‖∞` of the model gradient.
    pub gradient_norm: f64,
    pub trust_radius: f64,
    /// `‖D⁻¹p‖`
    pub step_norm: f64,
    pub trust_ratio: f64,
    pub accepted: bool,
    pub step_kind: StepKind,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub vars: TrajectoryVars,
    pub records: Vec<IterationRecord>,
    pub termination: TerminationReason,
    /// Trust radius after the last iteration.
    pub trust_radius: f64,
}

impl Solution {
    pub fn accepted_steps(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }
}

/// Diagonal of `D = diag(H)^{-1/4}`, or ones when scaling is off.
pub fn scaling_matrix(h: &BlockPentaMatrix, enabled: bool) -> Result<DVector<f64>> {
    let d = h.diagonal();
    if !enabled {
        return Ok(DVector::from_element(d.len(), 1.0));
    }
    if let Some(index) = d.iter().position(|x| !(*x > 0.0)) {
        return Err(Error::NonPositiveDiagonal { index, value: d[index] });
    }
    Ok(d.map(|x| x.powf(-0.25)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoglegStep {
    pub step: DVector<f64>,
    pub kind: StepKind,
    /// `‖D⁻¹p‖`
    pub scaled_norm: f64,
    pub at_boundary: bool,
}

/// Scaled Cauchy point `D p̃_U` along `−g̃`, truncated at the boundary.
fn scaled_cauchy(g: &DVector<f64>, h: &BlockPentaMatrix, d: &DVector<f64>, radius: f64) -> Result<DoglegStep> {
    let gs = g.component_mul(d);
    let gnorm = gs.norm();
    if gnorm == 0.0 {
        return Ok(DoglegStep {
            step: DVector::zeros(g.len()),
            kind: StepKind::ScaledCauchy,
            scaled_norm: 0.0,
            at_boundary: false,
        });
    }
    let dir = gs.component_mul(d);
    let curvature = dir.dot(&h.mul_vec(&dir)?);
    let unconstrained = if curvature > 0.0 {
        gnorm * gnorm / curvature * gnorm
    } else {
        f64::INFINITY
    };
    let (len, at_boundary) = if unconstrained >= radius {
        (radius, true)
    } else {
        (unconstrained, false)
    };
    let ps = &gs * (-len / gnorm);
    Ok(DoglegStep {
        step: ps.component_mul(d),
        kind: StepKind::ScaledCauchy,
        scaled_norm: len,
        at_boundary,
    })
}

/// Dogleg step in the scaled variables `p̃ = D⁻¹p`, returned unscaled.
pub fn dogleg_step(
    g: &DVector<f64>,
    h: &BlockPentaMatrix,
    fact: &BlockFactorization,
    d: &DVector<f64>,
    radius: f64,
) -> Result<DoglegStep> {
    let newton = -fact.solve(g)?;
    let newton_s = newton.component_div(d);
    let newton_norm = newton_s.norm();
    if newton_norm <= radius {
        return Ok(DoglegStep {
            step: newton,
            kind: StepKind::FullNewton,
            scaled_norm: newton_norm,
            at_boundary: false,
        });
    }
    let cauchy = scaled_cauchy(g, h, d, f64::INFINITY)?;
    if cauchy.scaled_norm >= radius {
        return scaled_cauchy(g, h, d, radius);
    }
    // ‖u + t (b − u)‖ = Δ for t ∈ [0, 1].
    let u = cauchy.step.component_div(d);
    let diff = &newton_s - &u;
    let a = diff.norm_squared();
    let b = 2.0 * u.dot(&diff);
    let c = u.norm_squared() - radius * radius;
    let t = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
    let ps = u + diff * t.clamp(0.0, 1.0);
    Ok(DoglegStep {
        scaled_norm: ps.norm(),
        step: ps.component_mul(d),
        kind: StepKind::DoglegInterpolation,
        at_boundary: true,
    })
}

/// Ratio test and radius update. Returns `(accept, new radius, ρ)`.
pub fn trust_ratio_and_update(
    old_value: f64,
    new_value: f64,
    predicted_reduction: f64,
    radius: f64,
    at_boundary: bool,
    options: &SolverOptions,
) -> (bool, f64, f64) {
    if !(predicted_reduction > 0.0) || !new_value.is_finite() {
        return (false, radius / 4.0, f64::NEG_INFINITY);
    }
    let rho = (old_value - new_value) / predicted_reduction;
    let radius = if rho < 0.25 {
        radius / 4.0
    } else if rho > 0.75 && at_boundary {
        (2.0 * radius).min(options.max_radius)
    } else {
        radius
    };
    (rho > options.eta, radius, rho)
}

/// `λ = (A H⁻¹ Aᵀ)⁻¹ (h − A H⁻¹ g)`.
pub fn lagrange_multipliers(
    fact: &BlockFactorization,
    a: &DMatrix<f64>,
    g: &DVector<f64>,
    h: &DVector<f64>,
) -> Result<DVector<f64>> {
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let hinv_at = fact.solve_multi(&a.transpose())?;
    let schur = a * &hinv_at;
    let rhs = h - a * fact.solve(g)?;
    let chol = schur.clone().cholesky().ok_or_else(|| {
        let diag_min = schur.diagonal().min();
        Error::SingularSchur(format!(
            "{}x{} matrix A·H⁻¹·Aᵀ is not positive definite (smallest diagonal {diag_min:.3e}); constraints may be rank deficient",
            schur.nrows(),
            schur.ncols()
        ))
    })?;
    Ok(chol.solve(&rhs))
}

fn merit_value(cost: f64, h: &DVector<f64>, lambda: &DVector<f64>, options: &SolverOptions) -> f64 {
    let mut m = cost;
    if lambda.len() == h.len() && !lambda.is_empty() {
        m += h.dot(lambda);
    }
    if options.merit_penalty > 0.0 {
        m += 0.5 * options.merit_penalty * h.norm_squared();
    }
    m
}

/// Mutable solver state carried between calls so that the MPC loop can run
/// one iteration at a time.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub vars: TrajectoryVars,
    pub trust_radius: f64,
    factorization_failures: usize,
}

impl SolverState {
    pub fn new(problem: &TrajOptProblem, initial_guess: Vec<DVector<f64>>, radius: f64) -> Result<Self> {
        Ok(Self {
            vars: problem.evaluate(initial_guess)?,
            trust_radius: radius,
            factorization_failures: 0,
        })
    }
}

/// Outcome of one iteration.
pub enum IterationOutcome {
    Continue,
    Terminate(TerminationReason),
}

/// Snapshot record of an iterate with no step attached.
pub fn stepless_record(
    problem: &TrajOptProblem,
    vars: &TrajectoryVars,
    radius: f64,
    iteration: usize,
) -> IterationRecord {
    let cost = problem.total_cost(vars);
    IterationRecord {
        iteration,
        cost,
        constraint_violation: problem.unactuated_constraint(vars).norm_squared(),
        merit: cost,
        trial_merit: f64::NAN,
        gradient_norm: f64::NAN,
        trust_radius: radius,
        step_norm: 0.0,
        trust_ratio: f64::NAN,
        accepted: false,
        step_kind: StepKind::None,
        wall_ms: 0.0,
    }
}

/// One trust-region iteration: derivatives, (multipliers), dogleg, ratio test.
pub fn iterate(
    problem: &TrajOptProblem,
    state: &mut SolverState,
    options: &SolverOptions,
    iteration: usize,
) -> Result<(IterationRecord, IterationOutcome)> {
    let start = Instant::now();
    let vars = &state.vars;
    let radius = state.trust_radius;
    let cache = problem.fd_inverse_dynamics_derivatives(vars)?;
    let g = problem.cost_gradient(&cache, vars)?;
    let hess = problem.gauss_newton_hessian(&cache)?;
    let cost = problem.total_cost(vars);
    let h = problem.unactuated_constraint(vars);
    let lagrange = problem.def.constraint_mode == ConstraintMode::Lagrange && !h.is_empty();

    let mut record = IterationRecord {
        iteration,
        cost,
        constraint_violation: h.norm_squared(),
        merit: cost,
        trial_merit: f64::NAN,
        gradient_norm: g.amax(),
        trust_radius: radius,
        step_norm: 0.0,
        trust_ratio: f64::NAN,
        accepted: false,
        step_kind: StepKind::None,
        wall_ms: 0.0,
    };

    let scaling = scaling_matrix(&hess, options.scaling).unwrap_or_else(|_| DVector::from_element(g.len(), 1.0));
    let (model_gradient, lambda, step) = match hess.factorize() {
        Ok(fact) => {
            state.factorization_failures = 0;
            let (model_gradient, lambda) = if lagrange {
                let a = problem.constraint_jacobian(&cache);
                let lambda = lagrange_multipliers(&fact, &a, &g, &h)?;
                (&g + a.tr_mul(&lambda), lambda)
            } else {
                (g.clone(), DVector::zeros(0))
            };
            let step = dogleg_step(&model_gradient, &hess, &fact, &scaling, radius)?;
            (model_gradient, lambda, step)
        }
        Err(Error::NotPositiveDefinite { block }) => {
            state.factorization_failures += 1;
            debug!(
                "factorization failed at block {block} ({} in a row)",
                state.factorization_failures
            );
            if state.factorization_failures > options.max_factorization_failures {
                record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
                return Ok((
                    record,
                    IterationOutcome::Terminate(TerminationReason::FactorizationFailureExhausted),
                ));
            }
            state.trust_radius = radius / 4.0;
            let mut step = scaled_cauchy(&g, &hess, &scaling, state.trust_radius)?;
            step.kind = StepKind::GradientFallback;
            (g.clone(), DVector::zeros(0), step)
        }
        Err(e) => return Err(e),
    };
    let radius = state.trust_radius;
    let merit = merit_value(cost, &h, &lambda, options);
    record.merit = merit;
    record.gradient_norm = model_gradient.amax();
    record.step_kind = step.kind;
    record.step_norm = step.scaled_norm;

    if record.gradient_norm < options.gradient_tolerance {
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        return Ok((record, IterationOutcome::Terminate(TerminationReason::Converged)));
    }

    let predicted = -(model_gradient.dot(&step.step) + 0.5 * step.step.dot(&hess.mul_vec(&step.step)?));
    if step.kind == StepKind::FullNewton && predicted.abs() < options.cost_reduction_tolerance * merit.abs() {
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        return Ok((record, IterationOutcome::Terminate(TerminationReason::Converged)));
    }
    let trial_q = problem.apply_step(&vars.q, &step.step);
    let trial = problem.evaluate(trial_q).ok();
    let trial_merit = trial
        .as_ref()
        .map(|t| {
            let ht = problem.unactuated_constraint(t);
            merit_value(problem.total_cost(t), &ht, &lambda, options)
        })
        .unwrap_or(f64::INFINITY);
    let (accept, new_radius, rho) =
        trust_ratio_and_update(merit, trial_merit, predicted, radius, step.at_boundary, options);
    record.trust_ratio = rho;
    record.trial_merit = trial_merit;
    record.accepted = accept;
    state.trust_radius = new_radius;

    let mut outcome = IterationOutcome::Continue;
    if accept {
        let trial = trial.expect("accepted steps have finite merit");
        let new_cost = problem.total_cost(&trial);
        state.vars = trial;
        if (cost - new_cost).abs() < options.cost_reduction_tolerance * cost.abs().max(f64::MIN_POSITIVE) {
            outcome = IterationOutcome::Terminate(TerminationReason::Converged);
        }
    }
    if matches!(outcome, IterationOutcome::Continue) && state.trust_radius < options.radius_floor {
        outcome = IterationOutcome::Terminate(TerminationReason::TrustRadiusFloor);
    }
    record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((record, outcome))
}

/// Runs the trust-region loop from `initial_guess` until a tolerance or the
/// iteration budget is hit.
pub fn solve(problem: &TrajOptProblem, initial_guess: Vec<DVector<f64>>, options: &SolverOptions) -> Result<Solution> {
    options.validate()?;
    let mut state = SolverState::new(problem, initial_guess, options.initial_radius)?;
    solve_from(problem, &mut state, options)
}

/// As [`solve`], continuing from an existing state.
pub fn solve_from(problem: &TrajOptProblem, state: &mut SolverState, options: &SolverOptions) -> Result<Solution> {
    let mut records = Vec::with_capacity(options.max_iterations.max(1));
    let mut termination = TerminationReason::MaxIterations;
    if options.max_iterations == 0 {
        records.push(stepless_record(problem, &state.vars, state.trust_radius, 0));
    }
    for it in 0..options.max_iterations {
        let (record, outcome) = iterate(problem, state, options, it)?;
        debug!(
            "iter {it}: cost {:.6e} |h|^2 {:.3e} radius {:.3e} rho {:.3} {}",
            record.cost,
            record.constraint_violation,
            record.trust_radius,
            record.trust_ratio,
            if record.accepted { "accepted" } else { "rejected" }
        );
        records.push(record);
        if let IterationOutcome::Terminate(reason) = outcome {
            termination = reason;
            break;
        }
    }
    info!(
        "solver stopped after {} iterations: {}",
        records.len(),
        termination.as_str()
    );
    Ok(Solution {
        vars: state.vars.clone(),
        records,
        termination,
        trust_radius: state.trust_radius,
    })
}
