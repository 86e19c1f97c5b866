//! Planar rigid-body dynamics.
//!
//! Bodies form a tree; each body hangs off its parent through exactly one
//! joint. Every quantity is assembled from body Jacobians, which is plenty
//! fast for the handful of degrees of freedom a desk-scale scenario has.
//!
//! Sign convention throughout: `M(q) v̇ + k(q, v) = B u + Jᵀ f`.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::contact::{CollisionPrimitive, Shape};
use crate::error::{check_len, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum JointKind {
    /// Rotation about the out-of-plane axis through the joint origin.
    Revolute,
    /// Translation along `axis`, expressed in the parent frame.
    Prismatic { axis: [f64; 2] },
    /// Three coordinates `(x, y, θ)` relative to the parent frame.
    PlanarFree,
}

impl JointKind {
    pub fn dofs(&self) -> usize {
        match self {
            JointKind::Revolute | JointKind::Prismatic { .. } => 1,
            JointKind::PlanarFree => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub kind: JointKind,
    /// Parent body, `None` for the world.
    pub parent: Option<usize>,
    /// Joint origin in the parent frame.
    pub origin: Vector2<f64>,
    /// Viscous damping applied to each of the joint's coordinates.
    pub damping: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub name: String,
    pub mass: f64,
    /// Rotational inertia about the center of mass.
    pub inertia: f64,
    /// Center of mass in the body frame.
    pub com: Vector2<f64>,
    pub joint: Joint,
}

/// Immutable description of a planar multibody system.
///
/// Positions and velocities share one coordinate set (`n_q == n_v`), so the
/// kinematic map between them is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTopology {
    bodies: Vec<Body>,
    dof_offsets: Vec<usize>,
    nv: usize,
    actuated: Vec<usize>,
    gravity: Vector2<f64>,
    primitives: Vec<CollisionPrimitive>,
    pairs: Vec<(usize, usize)>,
}

impl ModelTopology {
    pub fn new(
        bodies: Vec<Body>,
        actuated: Vec<usize>,
        gravity: Vector2<f64>,
        primitives: Vec<CollisionPrimitive>,
        pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let invalid = |msg: String| Err(Error::InvalidModel(msg));
        let mut dof_offsets = Vec::with_capacity(bodies.len());
        let mut nv = 0;
        for (i, body) in bodies.iter().enumerate() {
            if !(body.mass > 0.0) {
                return invalid(format!("body {i} ({}) mass must be > 0", body.name));
            }
            if !(body.inertia > 0.0) {
                return invalid(format!("body {i} ({}) inertia must be > 0", body.name));
            }
            if !(body.joint.damping >= 0.0) {
                return invalid(format!("body {i} ({}) damping must be >= 0", body.name));
            }
            if let Some(p) = body.joint.parent {
                if p >= i {
                    return invalid(format!(
                        "body {i} ({}) has parent {p}; parents must precede children",
                        body.name
                    ));
                }
            }
            if let JointKind::Prismatic { axis } = body.joint.kind {
                let norm = Vector2::from(axis).norm();
                if (norm - 1.0).abs() > 1e-9 {
                    return invalid(format!("body {i} ({}) prismatic axis must be unit", body.name));
                }
            }
            dof_offsets.push(nv);
            nv += body.joint.kind.dofs();
        }
        let mut seen = vec![false; nv];
        for &a in &actuated {
            if a >= nv {
                return invalid(format!("actuated index {a} out of range [0, {nv})"));
            }
            if seen[a] {
                return invalid(format!("actuated index {a} listed twice"));
            }
            seen[a] = true;
        }
        for (i, prim) in primitives.iter().enumerate() {
            if let Some(b) = prim.body {
                if b >= bodies.len() {
                    return invalid(format!("primitive {i} attached to missing body {b}"));
                }
            }
            match prim.shape {
                Shape::Sphere { radius } if !(radius > 0.0) => {
                    return invalid(format!("primitive {i} radius must be > 0"));
                }
                Shape::HalfSpace { normal } if (Vector2::from(normal).norm() - 1.0).abs() > 1e-12 => {
                    return invalid(format!("primitive {i} half-space normal must be unit"));
                }
                _ => {}
            }
        }
        for &(a, b) in &pairs {
            if a >= primitives.len() || b >= primitives.len() || a == b {
                return invalid(format!("contact pair ({a}, {b}) is invalid"));
            }
            let shapes = (&primitives[a].shape, &primitives[b].shape);
            if let (Shape::HalfSpace { .. }, Shape::HalfSpace { .. }) = shapes {
                return Err(Error::UnsupportedPair(format!("half-space/half-space pair ({a}, {b})")));
            }
        }
        Ok(Self {
            bodies,
            dof_offsets,
            nv,
            actuated,
            gravity,
            primitives,
            pairs,
        })
    }

    pub fn nq(&self) -> usize {
        self.nv
    }

    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn bodies(&self) -> &[Body] {
        &self.bodies
    }

    pub fn dof_offset(&self, body: usize) -> usize {
        self.dof_offsets[body]
    }

    pub fn actuated(&self) -> &[usize] {
        &self.actuated
    }

    /// Degrees of freedom not listed in the actuation map, in increasing order.
    pub fn unactuated(&self) -> Vec<usize> {
        (0..self.nv).filter(|i| !self.actuated.contains(i)).collect()
    }

    pub fn is_actuated(&self, dof: usize) -> bool {
        self.actuated.contains(&dof)
    }

    pub fn gravity(&self) -> Vector2<f64> {
        self.gravity
    }

    pub fn primitives(&self) -> &[CollisionPrimitive] {
        &self.primitives
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Joint damping, one entry per coordinate.
    pub fn damping(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.nv);
        for (i, body) in self.bodies.iter().enumerate() {
            let off = self.dof_offsets[i];
            for j in 0..body.joint.kind.dofs() {
                d[off + j] = body.joint.damping;
            }
        }
        d
    }

    pub fn kinematics(&self, q: &DVector<f64>, v: Option<&DVector<f64>>) -> Result<Kinematics> {
        Kinematics::new(self, q, v)
    }
}

/// Generalized positions and velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

impl State {
    pub fn new(q: DVector<f64>, v: DVector<f64>) -> Self {
        Self { q, v }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            q: DVector::zeros(n),
            v: DVector::zeros(n),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

#[inline]
pub(crate) fn perp(x: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-x.y, x.x)
}

#[inline]
pub(crate) fn rotate(angle: f64, x: Vector2<f64>) -> Vector2<f64> {
    let (s, c) = angle.sin_cos();
    Vector2::new(c * x.x - s * x.y, s * x.x + c * x.y)
}

/// Per-body frame kinematics at a configuration.
#[derive(Clone, Debug)]
pub struct BodyFrame {
    pub origin: Vector2<f64>,
    pub angle: f64,
    /// 2×n_v Jacobian of the frame origin.
    pub jac_origin: DMatrix<f64>,
    /// 1×n_v Jacobian of the frame angle.
    pub jac_angle: DMatrix<f64>,
    pub origin_velocity: Vector2<f64>,
    pub angular_velocity: f64,
    /// Origin acceleration with zero generalized acceleration.
    pub origin_bias_acc: Vector2<f64>,
}

/// Forward kinematics of every body frame. Velocity-dependent fields are
/// zero when no velocity was supplied.
#[derive(Clone, Debug)]
pub struct Kinematics {
    frames: Vec<BodyFrame>,
    nv: usize,
}

impl Kinematics {
    fn new(model: &ModelTopology, q: &DVector<f64>, v: Option<&DVector<f64>>) -> Result<Self> {
        let nv = model.nv;
        check_len("q", nv, q.len())?;
        if let Some(v) = v {
            check_len("v", nv, v.len())?;
        }
        let vel = |i: usize| v.map_or(0.0, |v| v[i]);
        let mut frames: Vec<BodyFrame> = Vec::with_capacity(model.bodies.len());
        for (b, body) in model.bodies.iter().enumerate() {
            let off = model.dof_offsets[b];
            let world = BodyFrame {
                origin: Vector2::zeros(),
                angle: 0.0,
                jac_origin: DMatrix::zeros(2, nv),
                jac_angle: DMatrix::zeros(1, nv),
                origin_velocity: Vector2::zeros(),
                angular_velocity: 0.0,
                origin_bias_acc: Vector2::zeros(),
            };
            let parent = match body.joint.parent {
                Some(p) => &frames[p],
                None => &world,
            };
            // Offset of the child origin from the parent origin, world frame.
            let (local, mut frame) = match &body.joint.kind {
                JointKind::Revolute => {
                    let mut f = parent.clone();
                    f.angle += q[off];
                    f.jac_angle[(0, off)] += 1.0;
                    f.angular_velocity += vel(off);
                    (body.joint.origin, f)
                }
                JointKind::Prismatic { axis } => {
                    let axis = Vector2::from(*axis);
                    (body.joint.origin + axis * q[off], parent.clone())
                }
                JointKind::PlanarFree => {
                    let mut f = parent.clone();
                    f.angle += q[off + 2];
                    f.jac_angle[(0, off + 2)] += 1.0;
                    f.angular_velocity += vel(off + 2);
                    (body.joint.origin + Vector2::new(q[off], q[off + 1]), f)
                }
            };
            let d = rotate(parent.angle, local);
            let w = parent.angular_velocity;
            frame.origin = parent.origin + d;
            let pd = perp(d);
            for c in 0..nv {
                let ja = parent.jac_angle[(0, c)];
                frame.jac_origin[(0, c)] = parent.jac_origin[(0, c)] + pd.x * ja;
                frame.jac_origin[(1, c)] = parent.jac_origin[(1, c)] + pd.y * ja;
            }
            frame.origin_velocity = parent.origin_velocity + w * pd;
            frame.origin_bias_acc = parent.origin_bias_acc - w * w * d;
            // Translational joint coordinates, as (dof, world direction).
            let slides: Vec<(usize, Vector2<f64>)> = match &body.joint.kind {
                JointKind::Revolute => vec![],
                JointKind::Prismatic { axis } => {
                    vec![(off, rotate(parent.angle, Vector2::from(*axis)))]
                }
                JointKind::PlanarFree => vec![
                    (off, rotate(parent.angle, Vector2::x())),
                    (off + 1, rotate(parent.angle, Vector2::y())),
                ],
            };
            for (dof, dir) in slides {
                frame.jac_origin[(0, dof)] += dir.x;
                frame.jac_origin[(1, dof)] += dir.y;
                frame.origin_velocity += dir * vel(dof);
                frame.origin_bias_acc += 2.0 * w * perp(dir) * vel(dof);
            }
            frames.push(frame);
        }
        Ok(Self { frames, nv })
    }

    pub fn frame(&self, body: usize) -> &BodyFrame {
        &self.frames[body]
    }

    /// World position of a point fixed in `body` (or in the world).
    pub fn point_position(&self, body: Option<usize>, local: Vector2<f64>) -> Vector2<f64> {
        match body {
            Some(b) => {
                let f = &self.frames[b];
                f.origin + rotate(f.angle, local)
            }
            None => local,
        }
    }

    /// 2×n_v Jacobian of the material point of `body` currently at `world_point`.
    pub fn point_jacobian_at(&self, body: Option<usize>, world_point: Vector2<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(2, self.nv);
        if let Some(b) = body {
            let f = &self.frames[b];
            let r = perp(world_point - f.origin);
            for c in 0..self.nv {
                let ja = f.jac_angle[(0, c)];
                jac[(0, c)] = f.jac_origin[(0, c)] + r.x * ja;
                jac[(1, c)] = f.jac_origin[(1, c)] + r.y * ja;
            }
        }
        jac
    }

    /// Velocity of the material point of `body` currently at `world_point`.
    pub fn point_velocity_at(&self, body: Option<usize>, world_point: Vector2<f64>) -> Vector2<f64> {
        match body {
            Some(b) => {
                let f = &self.frames[b];
                f.origin_velocity + f.angular_velocity * perp(world_point - f.origin)
            }
            None => Vector2::zeros(),
        }
    }

    /// Acceleration of a body-fixed point when the generalized acceleration is zero.
    fn point_bias_acc_at(&self, body: usize, world_point: Vector2<f64>) -> Vector2<f64> {
        let f = &self.frames[body];
        let w = f.angular_velocity;
        f.origin_bias_acc - w * w * (world_point - f.origin)
    }
}

/// Generalized mass matrix `M(q)`.
pub fn mass_matrix(model: &ModelTopology, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let kin = model.kinematics(q, None)?;
    Ok(mass_matrix_from(model, &kin))
}

pub(crate) fn mass_matrix_from(model: &ModelTopology, kin: &Kinematics) -> DMatrix<f64> {
    let nv = model.nv;
    let mut m = DMatrix::zeros(nv, nv);
    for (b, body) in model.bodies.iter().enumerate() {
        let com = kin.point_position(Some(b), body.com);
        let jc = kin.point_jacobian_at(Some(b), com);
        let ja = &kin.frame(b).jac_angle;
        m += body.mass * jc.transpose() * &jc + body.inertia * ja.transpose() * ja;
    }
    // Exact symmetry regardless of summation order.
    let mt = m.transpose();
    (m + mt) * 0.5
}

/// Bias forces `k(q, v)`: velocity products, gravity and joint damping.
pub fn bias_forces(model: &ModelTopology, q: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    let kin = model.kinematics(q, Some(v))?;
    Ok(bias_forces_from(model, &kin, v))
}

pub(crate) fn bias_forces_from(model: &ModelTopology, kin: &Kinematics, v: &DVector<f64>) -> DVector<f64> {
    let mut k = model.damping().component_mul(v);
    for (b, body) in model.bodies.iter().enumerate() {
        let com = kin.point_position(Some(b), body.com);
        let jc = kin.point_jacobian_at(Some(b), com);
        let acc = kin.point_bias_acc_at(b, com) - model.gravity;
        k += body.mass * jc.transpose() * acc;
    }
    k
}

/// Generalized forces realizing acceleration `a`:
/// `M(q) a + k(q, v) − external`.
pub fn inverse_dynamics(
    model: &ModelTopology,
    q: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
    external: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("a", model.nv, a.len())?;
    check_len("external force", model.nv, external.len())?;
    let kin = model.kinematics(q, Some(v))?;
    let m = mass_matrix_from(model, &kin);
    Ok(m * a + bias_forces_from(model, &kin, v) - external)
}

/// Acceleration produced by `applied`: `M(q)⁻¹ (applied − k(q, v))`.
pub fn forward_dynamics(
    model: &ModelTopology,
    q: &DVector<f64>,
    v: &DVector<f64>,
    applied: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("applied force", model.nv, applied.len())?;
    let kin = model.kinematics(q, Some(v))?;
    let m = mass_matrix_from(model, &kin);
    let rhs = applied - bias_forces_from(model, &kin, v);
    let chol = m.cholesky().ok_or(Error::SingularMassMatrix)?;
    Ok(chol.solve(&rhs))
}

/// Potential energy of gravity, used by energy checks.
pub fn potential_energy(model: &ModelTopology, q: &DVector<f64>) -> Result<f64> {
    let kin = model.kinematics(q, None)?;
    Ok(model
        .bodies
        .iter()
        .enumerate()
        .map(|(b, body)| -body.mass * model.gravity.dot(&kin.point_position(Some(b), body.com)))
        .sum())
}

pub fn kinetic_energy(model: &ModelTopology, q: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    let m = mass_matrix(model, q)?;
    check_len("v", model.nv, v.len())?;
    Ok(0.5 * v.dot(&(m * v)))
}
