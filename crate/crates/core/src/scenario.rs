//! TOML scenario files.
//!
//! A scenario bundles a model, planner and simulator contact parameters, the
//! optimization problem, solver options and an optional MPC section. Keys
//! carry their units; unknown keys are rejected.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::contact::{CollisionPrimitive, ContactParams, Shape};
use crate::dynamics::{Body, Joint, JointKind, ModelTopology, State};
use crate::error::{Error, Result};
use crate::mpc::{Disturbance, GoalRule, MpcConfig, SimulatorConfig, TrackingGains};
use crate::problem::{ConstraintMode, ProblemDefinition, TrajOptProblem};
use crate::solver::SolverOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub model: ModelSpec,
    pub planner_contact: ContactParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulator: Option<SimulatorSpec>,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc: Option<MpcSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub gravity_m_per_s2: [f64; 2],
    /// Actuated coordinate indices.
    pub actuated: Vec<usize>,
    pub bodies: Vec<BodySpec>,
    #[serde(default)]
    pub primitives: Vec<PrimitiveSpec>,
    /// Pairs of primitive names that may touch.
    #[serde(default)]
    pub pairs: Vec<[String; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    pub name: String,
    pub mass_kg: f64,
    pub inertia_kg_m2: f64,
    #[serde(default)]
    pub com_m: [f64; 2],
    pub joint: JointSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    Revolute,
    Prismatic,
    PlanarFree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    #[serde(rename = "type")]
    pub kind: JointType,
    /// Parent body name; omitted for the world.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub origin_m: [f64; 2],
    /// Prismatic axis in the parent frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<[f64; 2]>,
    /// N·m·s/rad on rotational coordinates, N·s/m on translational ones.
    #[serde(default)]
    pub damping_si: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum ShapeSpec {
    Sphere { radius_m: f64 },
    HalfSpace { normal: [f64; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimitiveSpec {
    pub name: String,
    /// Owning body name; omitted for the world.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default)]
    pub offset_m: [f64; 2],
    pub shape: ShapeSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorSpec {
    /// Defaults to `δt / 50`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_step_s: Option<f64>,
    /// Defaults to a stiffer copy of the planner parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact: Option<ContactParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum NominalSpec {
    Constant {
        q: Vec<f64>,
        v: Vec<f64>,
    },
    /// Linear interpolation from `start_q` at knot 0 to `end_q` at knot N.
    Ramp {
        start_q: Vec<f64>,
        end_q: Vec<f64>,
        v: Vec<f64>,
    },
    Knots {
        q: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// Every knot at the initial position.
    #[default]
    HoldInitial,
    /// Nominal positions, with `q_0` pinned.
    Nominal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub horizon_steps: usize,
    pub time_step_s: f64,
    pub q_weights: Vec<f64>,
    pub v_weights: Vec<f64>,
    pub qf_weights: Vec<f64>,
    pub vf_weights: Vec<f64>,
    /// Entries on unactuated coordinates are ignored; `unactuated_weight`
    /// takes their place.
    pub r_weights: Vec<f64>,
    pub unactuated_weight: f64,
    #[serde(default)]
    pub constraint_mode: ConstraintMode,
    pub initial_q: Vec<f64>,
    pub initial_v: Vec<f64>,
    pub nominal: NominalSpec,
    #[serde(default)]
    pub initial_guess: InitialGuess,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSpec {
    pub replan_period_s: f64,
    pub episode_seconds: f64,
    #[serde(default = "default_initial_iterations")]
    pub initial_iterations: usize,
    pub goal: GoalRule,
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<Disturbance>,
    #[serde(default)]
    pub zero_unactuated_velocity: bool,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_initial_iterations() -> usize {
    20
}

fn default_log_every() -> usize {
    1
}

/// Fully validated configuration.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub problem: TrajOptProblem,
    pub initial_guess: Vec<DVector<f64>>,
    pub solver: SolverOptions,
    pub simulator: SimulatorConfig,
    pub mpc: Option<(MpcConfig, TrackingGains)>,
}

fn param(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field: field.into(),
        reason: reason.into(),
    }
}

fn vector(field: &str, values: &[f64], n: usize) -> Result<DVector<f64>> {
    if values.len() != n {
        return Err(param(field, format!("expected {n} entries, got {}", values.len())));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(param(field, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(values))
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario files always serialize")
    }

    pub fn build_model(&self) -> Result<ModelTopology> {
        let m = &self.model;
        let body_index: HashMap<&str, usize> = m.bodies.iter().enumerate().map(|(i, b)| (b.name.as_str(), i)).collect();
        if body_index.len() != m.bodies.len() {
            return Err(param("model.bodies", "body names must be unique"));
        }
        let lookup = |field: String, name: &Option<String>| -> Result<Option<usize>> {
            match name {
                None => Ok(None),
                Some(n) => body_index
                    .get(n.as_str())
                    .copied()
                    .map(Some)
                    .ok_or_else(|| param(field, format!("unknown body `{n}`"))),
            }
        };
        let mut bodies = Vec::with_capacity(m.bodies.len());
        for (i, b) in m.bodies.iter().enumerate() {
            let field = format!("model.bodies[{i}].joint");
            let kind = match (b.joint.kind, b.joint.axis) {
                (JointType::Prismatic, Some(axis)) => JointKind::Prismatic { axis },
                (JointType::Prismatic, None) => {
                    return Err(param(format!("{field}.axis"), "required for prismatic joints"))
                }
                (_, Some(_)) => return Err(param(format!("{field}.axis"), "only prismatic joints take an axis")),
                (JointType::Revolute, None) => JointKind::Revolute,
                (JointType::PlanarFree, None) => JointKind::PlanarFree,
            };
            bodies.push(Body {
                name: b.name.clone(),
                mass: b.mass_kg,
                inertia: b.inertia_kg_m2,
                com: Vector2::from(b.com_m),
                joint: Joint {
                    kind,
                    parent: lookup(format!("{field}.parent"), &b.joint.parent)?,
                    origin: Vector2::from(b.joint.origin_m),
                    damping: b.joint.damping_si,
                },
            });
        }
        let mut primitives = Vec::with_capacity(m.primitives.len());
        for (i, p) in m.primitives.iter().enumerate() {
            primitives.push(CollisionPrimitive {
                name: p.name.clone(),
                body: lookup(format!("model.primitives[{i}].body"), &p.body)?,
                offset: Vector2::from(p.offset_m),
                shape: match p.shape {
                    ShapeSpec::Sphere { radius_m } => Shape::Sphere { radius: radius_m },
                    ShapeSpec::HalfSpace { normal } => Shape::HalfSpace { normal },
                },
            });
        }
        let prim_index: HashMap<&str, usize> = m
            .primitives
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.as_str(), i))
            .collect();
        if prim_index.len() != m.primitives.len() {
            return Err(param("model.primitives", "primitive names must be unique"));
        }
        let mut pairs = Vec::with_capacity(m.pairs.len());
        for (i, [a, b]) in m.pairs.iter().enumerate() {
            let get = |n: &String| {
                prim_index
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| param(format!("model.pairs[{i}]"), format!("unknown primitive `{n}`")))
            };
            pairs.push((get(a)?, get(b)?));
        }
        ModelTopology::new(
            bodies,
            m.actuated.clone(),
            Vector2::from(m.gravity_m_per_s2),
            primitives,
            pairs,
        )
    }

    fn nominal(&self, n: usize) -> Result<Vec<State>> {
        let p = &self.problem;
        let knots = p.horizon_steps + 1;
        let field = "problem.nominal";
        match &p.nominal {
            NominalSpec::Constant { q, v } => {
                let s = State::new(
                    vector(&format!("{field}.q"), q, n)?,
                    vector(&format!("{field}.v"), v, n)?,
                );
                Ok(vec![s; knots])
            }
            NominalSpec::Ramp { start_q, end_q, v } => {
                let a = vector(&format!("{field}.start_q"), start_q, n)?;
                let b = vector(&format!("{field}.end_q"), end_q, n)?;
                let v = vector(&format!("{field}.v"), v, n)?;
                Ok((0..knots)
                    .map(|k| {
                        let s = k as f64 / p.horizon_steps as f64;
                        State::new(&a * (1.0 - s) + &b * s, v.clone())
                    })
                    .collect())
            }
            NominalSpec::Knots { q, v } => {
                if q.len() != knots || v.len() != knots {
                    return Err(param(field, format!("expected {knots} knots for q and v")));
                }
                q.iter()
                    .zip(v)
                    .enumerate()
                    .map(|(k, (qk, vk))| {
                        Ok(State::new(
                            vector(&format!("{field}.q[{k}]"), qk, n)?,
                            vector(&format!("{field}.v[{k}]"), vk, n)?,
                        ))
                    })
                    .collect()
            }
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        let model = self.build_model()?;
        self.planner_contact
            .validate()
            .map_err(|e| prefix("planner_contact", e))?;
        let n = model.nv();
        let p = &self.problem;
        let f = |name: &str, v: &[f64]| vector(&format!("problem.{name}"), v, n);
        let def = ProblemDefinition {
            horizon: p.horizon_steps,
            time_step: p.time_step_s,
            q_weights: f("q_weights", &p.q_weights)?,
            v_weights: f("v_weights", &p.v_weights)?,
            qf_weights: f("qf_weights", &p.qf_weights)?,
            vf_weights: f("vf_weights", &p.vf_weights)?,
            r_weights: f("r_weights", &p.r_weights)?,
            penalty_weight: p.unactuated_weight,
            nominal: self.nominal(n)?,
            initial: State::new(f("initial_q", &p.initial_q)?, f("initial_v", &p.initial_v)?),
            constraint_mode: p.constraint_mode,
        };
        let problem = TrajOptProblem::new(model, self.planner_contact, def).map_err(|e| prefix("problem", e))?;
        self.solver.validate().map_err(|e| prefix("solver", e))?;

        let initial_guess = match p.initial_guess {
            InitialGuess::HoldInitial => vec![problem.def.initial.q.clone(); p.horizon_steps + 1],
            InitialGuess::Nominal => {
                let mut q: Vec<_> = problem.def.nominal.iter().map(|s| s.q.clone()).collect();
                q[0] = problem.def.initial.q.clone();
                q
            }
        };

        let mut simulator = SimulatorConfig::derived_from(p.time_step_s, &self.planner_contact);
        if let Some(s) = &self.simulator {
            if let Some(dt) = s.time_step_s {
                simulator.time_step = dt;
            }
            if let Some(c) = s.contact {
                simulator.contact = c;
            }
        }
        simulator.validate(p.time_step_s).map_err(|e| prefix("simulator", e))?;

        let mpc = match &self.mpc {
            None => None,
            Some(m) => {
                let config = MpcConfig {
                    replan_period: m.replan_period_s,
                    episode_seconds: m.episode_seconds,
                    replan: true,
                    initial_iterations: m.initial_iterations,
                    goal: m.goal.clone(),
                    disturbance: m.disturbance,
                    zero_unactuated_velocity: m.zero_unactuated_velocity,
                    log_every: m.log_every,
                };
                let gains = TrackingGains {
                    kp: m.kp.clone(),
                    kd: m.kd.clone(),
                };
                config.validate(&problem.model, p.time_step_s, simulator.time_step)?;
                gains.validate(&problem.model).map_err(|e| prefix("mpc", e))?;
                Some((config, gains))
            }
        };
        Ok(Scenario {
            name: self.name.clone(),
            problem,
            initial_guess,
            solver: self.solver.clone(),
            simulator,
            mpc,
        })
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidParameter { field, reason } if !field.starts_with(section) => Error::InvalidParameter {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    }
}

/// The scenarios shipped in the repository's `scenarios/` directory.
pub mod builtin {
    use super::ScenarioFile;

    pub const SPINNER: &str = include_str!("../../../scenarios/spinner.toml");
    pub const HOPPER: &str = include_str!("../../../scenarios/hopper.toml");
    pub const PUSHER: &str = include_str!("../../../scenarios/pusher.toml");

    pub fn all() -> [(&'static str, &'static str); 3] {
        [("spinner", SPINNER), ("hopper", HOPPER), ("pusher", PUSHER)]
    }

    pub fn spinner() -> ScenarioFile {
        ScenarioFile::from_toml(SPINNER).expect("shipped spinner scenario parses")
    }

    pub fn hopper() -> ScenarioFile {
        ScenarioFile::from_toml(HOPPER).expect("shipped hopper scenario parses")
    }

    pub fn pusher() -> ScenarioFile {
        ScenarioFile::from_toml(PUSHER).expect("shipped pusher scenario parses")
    }
}
