//! Analytic sphere and half-space queries, and the smooth compliant contact
//! law used by both the planner and the simulator.
//!
//! Normal force is `f_n = c(φ) · d(v_n)`, with a softplus compliance `c` and a
//! smoothed Hunt–Crossley dissipation factor `d`. Friction is a regularized
//! Coulomb law. All three pieces are continuously differentiable, so finite
//! differences through them are well behaved.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rotate, Kinematics, ModelTopology};
use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactParams {
    pub stiffness_n_per_m: f64,
    pub smoothing_m: f64,
    pub friction_coefficient: f64,
    pub stiction_velocity_m_per_s: f64,
    pub dissipation_velocity_m_per_s: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            stiffness_n_per_m: 200.0,
            smoothing_m: 0.01,
            friction_coefficient: 0.5,
            stiction_velocity_m_per_s: 0.05,
            dissipation_velocity_m_per_s: 0.1,
        }
    }
}

impl ContactParams {
    pub fn validate(&self) -> Result<()> {
        let check = |field: &str, ok: bool, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    field: field.to_string(),
                    reason: reason.to_string(),
                })
            }
        };
        check("stiffness_n_per_m", self.stiffness_n_per_m > 0.0, "must be > 0")?;
        check("smoothing_m", self.smoothing_m > 0.0, "must be > 0")?;
        check("friction_coefficient", self.friction_coefficient >= 0.0, "must be >= 0")?;
        check(
            "stiction_velocity_m_per_s",
            self.stiction_velocity_m_per_s > 0.0,
            "must be > 0",
        )?;
        check(
            "dissipation_velocity_m_per_s",
            self.dissipation_velocity_m_per_s > 0.0,
            "must be > 0",
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Solid region below a line. `normal` is the unit boundary normal in the
    /// owning frame and points out of the solid.
    HalfSpace {
        normal: [f64; 2],
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollisionPrimitive {
    pub name: String,
    /// Owning body, `None` for the world.
    pub body: Option<usize>,
    /// Sphere center, or a point on the half-space boundary, in the owning frame.
    pub offset: Vector2<f64>,
    pub shape: Shape,
}

/// Result of a closed-form distance query between two declared primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactPair {
    /// Signed distance, negative in penetration.
    pub distance: f64,
    /// Unit normal pointing from body B into body A.
    pub normal: Vector2<f64>,
    /// Midpoint between the two nearest surface points.
    pub witness: Vector2<f64>,
    pub primitive_a: usize,
    pub primitive_b: usize,
    pub body_a: Option<usize>,
    pub body_b: Option<usize>,
}

impl ContactPair {
    /// In-plane tangent, the normal rotated by −90°.
    pub fn tangent(&self) -> Vector2<f64> {
        Vector2::new(self.normal.y, -self.normal.x)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Smooth compliance `c(φ) = σ k log(1 + exp(−φ/σ))`.
pub fn compliance_force(distance: f64, params: &ContactParams) -> f64 {
    let sigma = params.smoothing_m;
    sigma * params.stiffness_n_per_m * softplus(-distance / sigma)
}

/// Smoothed Hunt–Crossley dissipation factor. `v_n > 0` is separating.
pub fn dissipation_factor(normal_velocity: f64, params: &ContactParams) -> f64 {
    let x = normal_velocity / params.dissipation_velocity_m_per_s;
    if x < 0.0 {
        1.0 - x
    } else if x < 2.0 {
        (x - 2.0) * (x - 2.0) / 4.0
    } else {
        0.0
    }
}

/// Signed scalar form of the regularized friction law along a tangent line.
pub fn friction_scalar(tangential_velocity: f64, normal_force: f64, params: &ContactParams) -> f64 {
    let vs = params.stiction_velocity_m_per_s;
    -params.friction_coefficient * tangential_velocity / (vs * vs + tangential_velocity * tangential_velocity).sqrt()
        * normal_force
}

/// Regularized Coulomb friction `f_t = −μ v_t / sqrt(v_s² + ‖v_t‖²) · f_n`.
pub fn friction_force(tangential_velocity: Vector2<f64>, normal_force: f64, params: &ContactParams) -> Vector2<f64> {
    let vs = params.stiction_velocity_m_per_s;
    -params.friction_coefficient * tangential_velocity / (vs * vs + tangential_velocity.norm_squared()).sqrt()
        * normal_force
}

fn primitive_pose(kin: &Kinematics, prim: &CollisionPrimitive) -> (Vector2<f64>, f64) {
    let angle = prim.body.map_or(0.0, |b| kin.frame(b).angle);
    (kin.point_position(prim.body, prim.offset), angle)
}

fn query_pair(kin: &Kinematics, model: &ModelTopology, ia: usize, ib: usize) -> Result<ContactPair> {
    let prims = model.primitives();
    // Keep the sphere as A.
    let (ia, ib) = match (&prims[ia].shape, &prims[ib].shape) {
        (Shape::HalfSpace { .. }, Shape::Sphere { .. }) => (ib, ia),
        _ => (ia, ib),
    };
    let (a, b) = (&prims[ia], &prims[ib]);
    let (center_a, _) = primitive_pose(kin, a);
    let (origin_b, angle_b) = primitive_pose(kin, b);
    let (distance, normal, witness) = match (&a.shape, &b.shape) {
        (Shape::Sphere { radius: ra }, Shape::Sphere { radius: rb }) => {
            let d = center_a - origin_b;
            let len = d.norm();
            let normal = if len > 0.0 { d / len } else { Vector2::y() };
            let phi = len - ra - rb;
            let surf_a = center_a - *ra * normal;
            let surf_b = origin_b + *rb * normal;
            (phi, normal, 0.5 * (surf_a + surf_b))
        }
        (Shape::Sphere { radius }, Shape::HalfSpace { normal }) => {
            let n = rotate(angle_b, Vector2::from(*normal));
            let height = n.dot(&(center_a - origin_b));
            let phi = height - radius;
            (phi, n, center_a - (radius + 0.5 * phi) * n)
        }
        _ => return Err(Error::UnsupportedPair(format!("{} / {}", a.name, b.name))),
    };
    Ok(ContactPair {
        distance,
        normal,
        witness,
        primitive_a: ia,
        primitive_b: ib,
        body_a: a.body,
        body_b: b.body,
    })
}

/// One entry per declared primitive couple, at any distance.
pub fn query_contact_pairs(model: &ModelTopology, q: &DVector<f64>) -> Result<Vec<ContactPair>> {
    let kin = model.kinematics(q, None)?;
    query_with(model, &kin)
}

pub(crate) fn query_with(model: &ModelTopology, kin: &Kinematics) -> Result<Vec<ContactPair>> {
    model
        .pairs()
        .iter()
        .map(|&(a, b)| query_pair(kin, model, a, b))
        .collect()
}

/// 2×n_v relative-velocity Jacobian of a pair at its witness point, rows
/// `[normal; tangent]`.
fn pair_jacobian(kin: &Kinematics, pair: &ContactPair) -> DMatrix<f64> {
    let rel = kin.point_jacobian_at(pair.body_a, pair.witness) - kin.point_jacobian_at(pair.body_b, pair.witness);
    let n = pair.normal;
    let t = pair.tangent();
    let mut j = DMatrix::zeros(2, rel.ncols());
    for c in 0..rel.ncols() {
        j[(0, c)] = n.x * rel[(0, c)] + n.y * rel[(1, c)];
        j[(1, c)] = t.x * rel[(0, c)] + t.y * rel[(1, c)];
    }
    j
}

/// Stacked contact Jacobian, rows `[v_n; v_t]` for each pair in order.
pub fn contact_jacobian(model: &ModelTopology, q: &DVector<f64>, pairs: &[ContactPair]) -> Result<DMatrix<f64>> {
    let kin = model.kinematics(q, None)?;
    let nv = model.nv();
    let mut jac = DMatrix::zeros(2 * pairs.len(), nv);
    for (i, pair) in pairs.iter().enumerate() {
        jac.view_mut((2 * i, 0), (2, nv)).copy_from(&pair_jacobian(&kin, pair));
    }
    Ok(jac)
}

/// Per-pair force record, forces expressed along the pair's normal and tangent.
#[derive(Clone, Debug, PartialEq)]
pub struct PairForce {
    pub pair: ContactPair,
    pub normal_velocity: f64,
    pub tangential_velocity: f64,
    pub normal_force: f64,
    pub tangential_force: f64,
}

impl PairForce {
    /// Force on body A in world coordinates.
    pub fn world_force(&self) -> Vector2<f64> {
        self.normal_force * self.pair.normal + self.tangential_force * self.pair.tangent()
    }
}

/// Evaluates every declared pair and returns the per-pair forces together with
/// the summed generalized force `Jᵀ f`.
pub fn contact_forces(
    model: &ModelTopology,
    q: &DVector<f64>,
    v: &DVector<f64>,
    params: &ContactParams,
) -> Result<(Vec<PairForce>, DVector<f64>)> {
    check_len("v", model.nv(), v.len())?;
    let kin = model.kinematics(q, None)?;
    contact_forces_with(model, &kin, v, params)
}

pub(crate) fn contact_forces_with(
    model: &ModelTopology,
    kin: &Kinematics,
    v: &DVector<f64>,
    params: &ContactParams,
) -> Result<(Vec<PairForce>, DVector<f64>)> {
    let pairs = query_with(model, kin)?;
    let mut generalized = DVector::zeros(model.nv());
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let j = pair_jacobian(kin, &pair);
        let vc = &j * v;
        let (vn, vt) = (vc[0], vc[1]);
        let fn_ = compliance_force(pair.distance, params) * dissipation_factor(vn, params);
        let ft = friction_scalar(vt, fn_, params);
        for c in 0..model.nv() {
            generalized[c] += j[(0, c)] * fn_ + j[(1, c)] * ft;
        }
        out.push(PairForce {
            pair,
            normal_velocity: vn,
            tangential_velocity: vt,
            normal_force: fn_,
            tangential_force: ft,
        });
    }
    Ok((out, generalized))
}

/// Generalized contact force `Jᵀ f` summed over all declared pairs.
pub fn contact_generalized_force(
    model: &ModelTopology,
    q: &DVector<f64>,
    v: &DVector<f64>,
    params: &ContactParams,
) -> Result<DVector<f64>> {
    contact_forces(model, q, v, params).map(|(_, f)| f)
}

/// Penetration at which a resting contact carries `load` newtons: solves
/// `c(φ) = load` in closed form.
pub fn equilibrium_distance(load: f64, params: &ContactParams) -> f64 {
    let sigma = params.smoothing_m;
    // σ k log(1 + e^{−φ/σ}) = load  ⇒  φ = −σ log(e^{load/(σk)} − 1)
    let x = load / (sigma * params.stiffness_n_per_m);
    -sigma * x.exp_m1().ln()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::dynamics::{Body, Joint, JointKind};

    /// Free disc of radius `r` above a ground half-space at y = 0.
    pub fn disc_on_ground(mass: f64, radius: f64, gravity: f64) -> ModelTopology {
        let body = Body {
            name: "disc".into(),
            mass,
            inertia: 0.5 * mass * radius * radius,
            com: Vector2::zeros(),
            joint: Joint {
                kind: JointKind::PlanarFree,
                parent: None,
                origin: Vector2::zeros(),
                damping: 0.0,
            },
        };
        let prims = vec![
            CollisionPrimitive {
                name: "disc".into(),
                body: Some(0),
                offset: Vector2::zeros(),
                shape: Shape::Sphere { radius },
            },
            CollisionPrimitive {
                name: "ground".into(),
                body: None,
                offset: Vector2::zeros(),
                shape: Shape::HalfSpace { normal: [0.0, 1.0] },
            },
        ];
        ModelTopology::new(vec![body], vec![], Vector2::new(0.0, -gravity), prims, vec![(1, 0)]).unwrap()
    }

    /// Two free discs with a sphere–sphere pair; `angle` rotates the world.
    pub fn two_discs(ra: f64, rb: f64) -> ModelTopology {
        let disc = |name: &str, m: f64, r: f64| Body {
            name: name.into(),
            mass: m,
            inertia: 0.5 * m * r * r,
            com: Vector2::zeros(),
            joint: Joint {
                kind: JointKind::PlanarFree,
                parent: None,
                origin: Vector2::zeros(),
                damping: 0.0,
            },
        };
        let sphere = |name: &str, body: usize, r: f64, off: Vector2<f64>| CollisionPrimitive {
            name: name.into(),
            body: Some(body),
            offset: off,
            shape: Shape::Sphere { radius: r },
        };
        ModelTopology::new(
            vec![disc("a", 1.0, ra), disc("b", 2.0, rb)],
            vec![],
            Vector2::zeros(),
            vec![
                sphere("a", 0, ra, Vector2::new(0.03, -0.02)),
                sphere("b", 1, rb, Vector2::new(-0.01, 0.04)),
            ],
            vec![(0, 1)],
        )
        .unwrap()
    }
}
