//! Closed-loop harness: a semi-implicit simulator, spline tracking of the
//! latest plan and a receding-horizon loop doing one solver iteration per
//! replan.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::contact::{contact_forces_with, ContactParams};
use crate::dynamics::{bias_forces_from, mass_matrix_from, ModelTopology, State};
use crate::error::{check_len, Error, Result};
use crate::problem::{ProblemDefinition, TrajOptProblem, TrajectoryVars};
use crate::solver::{iterate, solve, IterationRecord, SolverOptions, SolverState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulatorConfig {
    pub time_step: f64,
    pub contact: ContactParams,
}

impl SimulatorConfig {
    /// Stiffer, sharper contact than the planner's and a step of `δt / 50`.
    pub fn derived_from(planner_dt: f64, planner: &ContactParams) -> Self {
        Self {
            time_step: planner_dt / 50.0,
            contact: ContactParams {
                stiffness_n_per_m: planner.stiffness_n_per_m * 10.0,
                smoothing_m: planner.smoothing_m * 0.1,
                stiction_velocity_m_per_s: planner.stiction_velocity_m_per_s * 0.1,
                ..*planner
            },
        }
    }

    pub fn validate(&self, planner_dt: f64) -> Result<()> {
        if !(self.time_step > 0.0 && self.time_step <= planner_dt / 10.0) {
            return Err(Error::InvalidParameter {
                field: "simulator.time_step_s".into(),
                reason: format!("must lie in (0, δt/10 = {}]", planner_dt / 10.0),
            });
        }
        self.contact.validate()
    }
}

/// Semi-implicit Euler step: forces at the current state, then
/// `v⁺ = v + dt·a`, `q⁺ = q + dt·v⁺`.
pub fn simulate_step(
    model: &ModelTopology,
    contact: &ContactParams,
    state: &State,
    applied: &DVector<f64>,
    dt: f64,
) -> Result<State> {
    check_len("applied torque", model.nv(), applied.len())?;
    if !state.is_finite() || !applied.iter().all(|x| x.is_finite()) {
        return Err(Error::SimulationDiverged { time: f64::NAN });
    }
    let kin = model.kinematics(&state.q, Some(&state.v))?;
    let m = mass_matrix_from(model, &kin);
    let mut rhs = applied - bias_forces_from(model, &kin, &state.v);
    if !model.pairs().is_empty() {
        rhs += contact_forces_with(model, &kin, &state.v, contact)?.1;
    }
    let a = m.cholesky().ok_or(Error::SingularMassMatrix)?.solve(&rhs);
    let v = &state.v + a * dt;
    let q = &state.q + &v * dt;
    let next = State::new(q, v);
    if !next.is_finite() {
        return Err(Error::SimulationDiverged { time: f64::NAN });
    }
    Ok(next)
}

/// Natural cubic spline through equally spaced knots.
#[derive(Clone, Debug)]
struct NaturalSpline {
    h: f64,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    fn new(h: f64, y: Vec<f64>) -> Self {
        let n = y.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on m_{i−1} + 4 m_i + m_{i+1} = 6 Δ²y_i / h².
            let inner = n - 2;
            let mut c = vec![0.0; inner];
            let mut d = vec![0.0; inner];
            for i in 0..inner {
                let rhs = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]) / (h * h);
                let denom = 4.0 - if i > 0 { c[i - 1] } else { 0.0 };
                c[i] = 1.0 / denom;
                d[i] = (rhs - if i > 0 { d[i - 1] } else { 0.0 }) / denom;
            }
            for i in (0..inner).rev() {
                m[i + 1] = d[i] - if i + 1 < inner { c[i] * m[i + 2] } else { 0.0 };
            }
        }
        Self { h, y, m }
    }

    /// Value and first derivative at `t`, clamped to the knot range.
    fn eval(&self, t: f64) -> (f64, f64) {
        let n = self.y.len();
        if n == 1 {
            return (self.y[0], 0.0);
        }
        let t = t.clamp(0.0, self.h * (n - 1) as f64);
        let i = ((t / self.h).floor() as usize).min(n - 2);
        let h = self.h;
        let a = (i + 1) as f64 * h - t;
        let b = t - i as f64 * h;
        let (m0, m1, y0, y1) = (self.m[i], self.m[i + 1], self.y[i], self.y[i + 1]);
        let value = m0 * a.powi(3) / (6.0 * h)
            + m1 * b.powi(3) / (6.0 * h)
            + (y0 / h - m0 * h / 6.0) * a
            + (y1 / h - m1 * h / 6.0) * b;
        let slope =
            -m0 * a * a / (2.0 * h) + m1 * b * b / (2.0 * h) - (y0 / h - m0 * h / 6.0) + (y1 / h - m1 * h / 6.0);
        (value, slope)
    }
}

/// Splines through a plan's position knots plus its generalized forces.
#[derive(Clone, Debug)]
pub struct Plan {
    time_step: f64,
    splines: Vec<NaturalSpline>,
    tau: Vec<DVector<f64>>,
}

impl Plan {
    pub fn new(time_step: f64, q: &[DVector<f64>], tau: &[DVector<f64>]) -> Self {
        let n = q[0].len();
        let splines = (0..n)
            .map(|i| NaturalSpline::new(time_step, q.iter().map(|x| x[i]).collect()))
            .collect();
        Self {
            time_step,
            splines,
            tau: tau.to_vec(),
        }
    }

    pub fn from_vars(time_step: f64, vars: &TrajectoryVars) -> Self {
        Self::new(time_step, &vars.q, &vars.tau)
    }

    pub fn duration(&self) -> f64 {
        self.time_step * (self.splines[0].y.len() - 1) as f64
    }
}

/// `(q_d, v_d, τ_ff)` at plan time `t`, clamped to the plan. `τ_ff` is
/// linearly interpolated between `τ_k` placed at `t_k`.
pub fn interpolate_plan(plan: &Plan, t: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let n = plan.splines.len();
    let mut q = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    for (i, s) in plan.splines.iter().enumerate() {
        let (qi, vi) = s.eval(t);
        q[i] = qi;
        v[i] = vi;
    }
    let last = plan.tau.len() - 1;
    let x = (t / plan.time_step).clamp(0.0, last as f64);
    let k = (x.floor() as usize).min(last);
    let tau = if k == last {
        plan.tau[last].clone()
    } else {
        let w = x - k as f64;
        &plan.tau[k] * (1.0 - w) + &plan.tau[k + 1] * w
    };
    (q, v, tau)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingGains {
    /// One entry per actuated coordinate, in actuation order.
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
}

impl TrackingGains {
    pub fn validate(&self, model: &ModelTopology) -> Result<()> {
        let na = model.actuated().len();
        for (field, g) in [("kp", &self.kp), ("kd", &self.kd)] {
            if g.len() != na {
                return Err(Error::InvalidParameter {
                    field: format!("gains.{field}"),
                    reason: format!("expected {na} entries, got {}", g.len()),
                });
            }
            if g.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::InvalidParameter {
                    field: format!("gains.{field}"),
                    reason: "entries must be >= 0".into(),
                });
            }
        }
        Ok(())
    }
}

/// `u = u_ff + K_P (q_d − q̂) + K_D (v_d − v̂)` on actuated coordinates, zero
/// elsewhere.
pub fn pd_control(
    model: &ModelTopology,
    gains: &TrackingGains,
    q_d: &DVector<f64>,
    v_d: &DVector<f64>,
    u_ff: &DVector<f64>,
    estimate: &State,
) -> DVector<f64> {
    let mut u = DVector::zeros(model.nv());
    for (j, &i) in model.actuated().iter().enumerate() {
        u[i] = u_ff[i] + gains.kp[j] * (q_d[i] - estimate.q[i]) + gains.kd[j] * (v_d[i] - estimate.v[i]);
    }
    u
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum GoalRule {
    /// Keep the scenario's nominal trajectory.
    Fixed,
    /// Re-anchor the nominal of coordinate `dof` at its measured value,
    /// ramping by `offset` over the horizon.
    Advance { dof: usize, offset: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub time_s: f64,
    pub dof: usize,
    pub velocity_change: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcConfig {
    pub replan_period: f64,
    pub episode_seconds: f64,
    /// When false the initial plan is tracked open loop for the whole episode.
    pub replan: bool,
    /// Solver iterations spent on the initial plan before the episode starts.
    pub initial_iterations: usize,
    pub goal: GoalRule,
    pub disturbance: Option<Disturbance>,
    /// Report zero velocity for unactuated coordinates to the planner.
    pub zero_unactuated_velocity: bool,
    /// Keep every n-th simulator sample in the log.
    pub log_every: usize,
}

impl MpcConfig {
    pub fn validate(&self, model: &ModelTopology, planner_dt: f64, sim_dt: f64) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::InvalidParameter {
                field: format!("mpc.{field}"),
                reason,
            })
        };
        if !(self.replan_period >= sim_dt) {
            return bad("replan_period_s", format!("must be >= the simulator step {sim_dt}"));
        }
        if self.replan_period > planner_dt * 10.0 {
            warn!("replan period {} s spans many planner steps", self.replan_period);
        }
        if !(self.episode_seconds >= 0.0) {
            return bad("episode_seconds", "must be >= 0".into());
        }
        if self.log_every == 0 {
            return bad("log_every", "must be >= 1".into());
        }
        if let GoalRule::Advance { dof, .. } = self.goal {
            if dof >= model.nv() {
                return bad("goal.dof", format!("{dof} out of range"));
            }
        }
        if let Some(d) = self.disturbance {
            if d.dof >= model.nv() {
                return bad("disturbance.dof", format!("{} out of range", d.dof));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSample {
    pub time: f64,
    pub state: State,
    pub applied: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplanRecord {
    pub time: f64,
    /// Knots dropped from the front of the previous plan.
    pub shift: usize,
    pub solve_ms: f64,
    pub record: IterationRecord,
}

#[derive(Clone, Debug)]
pub struct EpisodeLog {
    pub samples: Vec<EpisodeSample>,
    pub replans: Vec<ReplanRecord>,
    pub planner_contact: ContactParams,
    pub simulator_contact: ContactParams,
    /// Set when the simulation blew up; the log ends there.
    pub divergence: Option<String>,
}

impl EpisodeLog {
    pub fn mean_solve_ms(&self) -> f64 {
        if self.replans.is_empty() {
            return 0.0;
        }
        self.replans.iter().map(|r| r.solve_ms).sum::<f64>() / self.replans.len() as f64
    }

    /// Net change of coordinate `dof` over the logged episode.
    pub fn net_change(&self, dof: usize) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.state.q[dof] - a.state.q[dof],
            _ => 0.0,
        }
    }

    /// First logged time after `after` at which `dof` has advanced by more
    /// than `margin` over the preceding `window` seconds.
    pub fn recovery_time(&self, dof: usize, after: f64, window: f64, margin: f64) -> Option<f64> {
        self.samples
            .iter()
            .filter(|s| s.time >= after + window)
            .find(|s| match self.position_at(dof, s.time - window) {
                Some(earlier) => s.state.q[dof] - earlier > margin,
                None => false,
            })
            .map(|s| s.time)
    }

    /// Position of `dof` at the first logged sample at or after `t`.
    pub fn position_at(&self, dof: usize, t: f64) -> Option<f64> {
        let i = self.samples.partition_point(|s| s.time < t - 1e-12);
        self.samples.get(i).map(|s| s.state.q[dof])
    }
}

/// Drops `shift` knots from the front, holding the last knot, then pins `q_0`.
pub fn shift_warm_start(q: &[DVector<f64>], shift: usize, q0: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = q.len();
    let mut out: Vec<_> = (0..n).map(|k| q[(k + shift).min(n - 1)].clone()).collect();
    out[0] = q0.clone();
    out
}

fn retarget(template: &ProblemDefinition, goal: &GoalRule, measured: &State) -> ProblemDefinition {
    let mut def = template.clone();
    def.initial = measured.clone();
    if let GoalRule::Advance { dof, offset } = *goal {
        let n = def.horizon as f64;
        for (k, s) in def.nominal.iter_mut().enumerate() {
            s.q[dof] = measured.q[dof] + offset * k as f64 / n;
        }
    }
    def
}

/// Receding-horizon episode against the built-in simulator.
pub fn run_mpc(
    template: &TrajOptProblem,
    initial_guess: Vec<DVector<f64>>,
    options: &SolverOptions,
    sim: &SimulatorConfig,
    gains: &TrackingGains,
    config: &MpcConfig,
) -> Result<EpisodeLog> {
    let model = &template.model;
    let dt = template.def.time_step;
    sim.validate(dt)?;
    gains.validate(model)?;
    config.validate(model, dt, sim.time_step)?;
    options.validate()?;

    let mut log = EpisodeLog {
        samples: vec![],
        replans: vec![],
        planner_contact: template.contact,
        simulator_contact: sim.contact,
        divergence: None,
    };
    let mut state = template.def.initial.clone();
    let steps = (config.episode_seconds / sim.time_step).round() as usize;
    if steps == 0 {
        return Ok(log);
    }

    let estimate = |s: &State| {
        let mut e = s.clone();
        if config.zero_unactuated_velocity {
            for u in model.unactuated() {
                e.v[u] = 0.0;
            }
        }
        e
    };

    let first = TrajOptProblem::new(
        model.clone(),
        template.contact,
        retarget(&template.def, &config.goal, &estimate(&state)),
    )?;
    let warm_options = SolverOptions {
        max_iterations: config.initial_iterations,
        ..options.clone()
    };
    let initial = solve(&first, initial_guess, &warm_options)?;
    let mut plan = Plan::from_vars(dt, &initial.vars);
    let mut plan_q = initial.vars.q.clone();
    let mut plan_start = 0.0;
    // Elapsed time not yet turned into a whole-knot shift.
    let mut backlog = 0.0;
    let mut radius = initial.trust_radius;
    let replan_every = ((config.replan_period / sim.time_step).round() as usize).max(1);
    let mut iteration = 0;

    for step in 0..steps {
        let time = step as f64 * sim.time_step;
        if let Some(d) = config.disturbance {
            if (time - d.time_s).abs() < 0.5 * sim.time_step {
                state.v[d.dof] += d.velocity_change;
            }
        }
        if config.replan && step > 0 && step % replan_every == 0 {
            let measured = estimate(&state);
            backlog += time - plan_start;
            let shift = (backlog / dt + 1e-9).floor() as usize;
            backlog = (backlog - shift as f64 * dt).max(0.0);
            let problem = TrajOptProblem::new(
                model.clone(),
                template.contact,
                retarget(&template.def, &config.goal, &measured),
            )?;
            let guess = shift_warm_start(&plan_q, shift, &measured.q);
            let start = Instant::now();
            let mut solver = SolverState::new(&problem, guess, radius)?;
            let (record, _) = iterate(&problem, &mut solver, options, iteration)?;
            let solve_ms = start.elapsed().as_secs_f64() * 1e3;
            iteration += 1;
            radius = solver.trust_radius.max(options.radius_floor);
            plan = Plan::from_vars(dt, &solver.vars);
            plan_q = solver.vars.q;
            plan_start = time;
            debug!("replan t={time:.3} cost {:.4e} shift {shift}", record.cost);
            log.replans.push(ReplanRecord {
                time,
                shift,
                solve_ms,
                record,
            });
        }
        let (q_d, v_d, u_ff) = interpolate_plan(&plan, time - plan_start);
        let u = pd_control(model, gains, &q_d, &v_d, &u_ff, &estimate(&state));
        if step % config.log_every == 0 {
            log.samples.push(EpisodeSample {
                time,
                state: state.clone(),
                applied: u.clone(),
            });
        }
        match simulate_step(model, &sim.contact, &state, &u, sim.time_step) {
            Ok(next) => state = next,
            Err(Error::SimulationDiverged { .. }) => {
                log.divergence = Some(format!("simulation diverged at t = {:.4} s", time + sim.time_step));
                return Ok(log);
            }
            Err(e) => return Err(e),
        }
    }
    log.samples.push(EpisodeSample {
        time: steps as f64 * sim.time_step,
        state,
        applied: DVector::zeros(model.nv()),
    });
    Ok(log)
}
