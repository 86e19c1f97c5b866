//! The inverse-dynamics least-squares transcription.
//!
//! Positions `q_0 … q_N` are the only decision variables; `q_0` is pinned to
//! the initial state, so the optimizer works on `q_1 … q_N`. Velocities are
//! backward differences, accelerations forward differences of velocities, and
//! the generalized force `τ_k` needed to go from step `k` to `k + 1` comes from
//! inverse dynamics with every state-dependent term evaluated at `k + 1`:
//!
//! ```text
//! v_k = (q_k − q_{k−1}) / δt            k = 1 … N   (v_0 given)
//! a_k = (v_{k+1} − v_k) / δt            k = 0 … N−1
//! τ_k = M(q_{k+1}) a_k + k(q_{k+1}, v_{k+1}) − Jᵀ(q_{k+1}) f(q_{k+1}, v_{k+1})
//! ```
//!
//! `τ_k` therefore depends on `q_{k−1}, q_k, q_{k+1}` only, which gives the
//! gradient a five-knot stencil and the Gauss–Newton Hessian a block
//! pentadiagonal structure.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::banded::BlockPentaMatrix;
use crate::contact::{contact_forces_with, ContactParams, PairForce};
use crate::dynamics::{bias_forces_from, mass_matrix_from, ModelTopology, State};
use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Unactuated generalized forces are penalized through the weight `w`
    /// placed in `R`.
    #[default]
    Penalty,
    /// `h(q) = 0` is handled with the Lagrange-multiplier dogleg.
    Lagrange,
}

/// Horizon, weights, nominal trajectory and initial condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemDefinition {
    pub horizon: usize,
    pub time_step: f64,
    /// Running position weights `Q_q`.
    pub q_weights: DVector<f64>,
    /// Running velocity weights `Q_v`.
    pub v_weights: DVector<f64>,
    pub qf_weights: DVector<f64>,
    pub vf_weights: DVector<f64>,
    /// Control weights; entries on unactuated coordinates are replaced by
    /// `penalty_weight`.
    pub r_weights: DVector<f64>,
    pub penalty_weight: f64,
    /// `x̄_0 … x̄_N`.
    pub nominal: Vec<State>,
    pub initial: State,
    pub constraint_mode: ConstraintMode,
}

impl ProblemDefinition {
    pub fn validate(&self, model: &ModelTopology) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::InvalidParameter {
                field: field.into(),
                reason,
            })
        };
        let n = model.nv();
        if self.horizon < 2 {
            return bad("horizon", format!("must be >= 2, got {}", self.horizon));
        }
        if !(self.time_step > 0.0) {
            return bad("time_step", "must be > 0".into());
        }
        for (field, w) in [
            ("q_weights", &self.q_weights),
            ("v_weights", &self.v_weights),
            ("qf_weights", &self.qf_weights),
            ("vf_weights", &self.vf_weights),
            ("r_weights", &self.r_weights),
        ] {
            if w.len() != n {
                return bad(field, format!("expected {n} entries, got {}", w.len()));
            }
            if let Some(i) = w.iter().position(|x| !(*x >= 0.0)) {
                return bad(field, format!("entry {i} must be >= 0"));
            }
        }
        for &a in model.actuated() {
            if !(self.r_weights[a] > 0.0) {
                return bad("r_weights", format!("actuated entry {a} must be > 0"));
            }
        }
        if !(self.penalty_weight >= 0.0) {
            return bad("penalty_weight", "must be >= 0".into());
        }
        if self.nominal.len() != self.horizon + 1 {
            return bad(
                "nominal",
                format!("expected {} knots, got {}", self.horizon + 1, self.nominal.len()),
            );
        }
        for s in self.nominal.iter().chain(std::iter::once(&self.initial)) {
            if s.q.len() != n || s.v.len() != n || !s.is_finite() {
                return bad("nominal", "states must be finite with one entry per coordinate".into());
            }
        }
        Ok(())
    }
}

/// Positions plus everything derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryVars {
    pub q: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub a: Vec<DVector<f64>>,
    pub tau: Vec<DVector<f64>>,
    /// Generalized contact force `Jᵀ f_k` used in `τ_k`.
    pub contact: Vec<DVector<f64>>,
}

/// Inverse-dynamics derivative blocks for every free knot `k = 1 … N`.
/// Index `k − 1` holds knot `k`.
#[derive(Clone, Debug)]
pub struct DerivativeCache {
    q: Vec<DVector<f64>>,
    /// `∂v_k/∂q_k`
    pub dv_cur: Vec<DMatrix<f64>>,
    /// `∂v_{k+1}/∂q_k`, absent for `k = N`.
    pub dv_next: Vec<Option<DMatrix<f64>>>,
    /// `∂τ_{k−1}/∂q_k`
    pub dtau_prev: Vec<DMatrix<f64>>,
    /// `∂τ_k/∂q_k`, absent for `k = N`.
    pub dtau_cur: Vec<Option<DMatrix<f64>>>,
    /// `∂τ_{k+1}/∂q_k`, absent for `k ≥ N − 1`.
    pub dtau_next: Vec<Option<DMatrix<f64>>>,
}

impl DerivativeCache {
    pub fn is_fresh_for(&self, q: &[DVector<f64>]) -> bool {
        self.q.as_slice() == q
    }

    /// `∂τ_j/∂q_k` when inside the stencil.
    pub fn dtau(&self, j: usize, k: usize) -> Option<&DMatrix<f64>> {
        if k == 0 || k > self.dv_cur.len() {
            return None;
        }
        let i = k - 1;
        if j + 1 == k {
            Some(&self.dtau_prev[i])
        } else if j == k {
            self.dtau_cur[i].as_ref()
        } else if j == k + 1 {
            self.dtau_next[i].as_ref()
        } else {
            None
        }
    }
}

/// Model, contact parameters and problem definition bundled together.
#[derive(Clone, Debug)]
pub struct TrajOptProblem {
    pub model: ModelTopology,
    pub contact: ContactParams,
    pub def: ProblemDefinition,
    r_effective: DVector<f64>,
    unactuated: Vec<usize>,
}

/// `v_k = (q_k − q_{k−1}) / δt` for `k ≥ 1`; `v_0` is the given initial velocity.
pub fn velocities_from_positions(q: &[DVector<f64>], v0: &DVector<f64>, time_step: f64) -> Vec<DVector<f64>> {
    std::iter::once(v0.clone())
        .chain(q.windows(2).map(|w| (&w[1] - &w[0]) / time_step))
        .collect()
}

/// `a_k = (v_{k+1} − v_k) / δt` for `k = 0 … N−1`.
pub fn accelerations_from_velocities(v: &[DVector<f64>], time_step: f64) -> Vec<DVector<f64>> {
    v.windows(2).map(|w| (&w[1] - &w[0]) / time_step).collect()
}

impl TrajOptProblem {
    pub fn new(model: ModelTopology, contact: ContactParams, def: ProblemDefinition) -> Result<Self> {
        contact.validate()?;
        def.validate(&model)?;
        let unactuated = model.unactuated();
        let mut r_effective = def.r_weights.clone();
        for &u in &unactuated {
            r_effective[u] = def.penalty_weight;
        }
        Ok(Self {
            model,
            contact,
            def,
            r_effective,
            unactuated,
        })
    }

    pub fn horizon(&self) -> usize {
        self.def.horizon
    }

    pub fn nv(&self) -> usize {
        self.model.nv()
    }

    /// Length of the decision vector `[q_1; …; q_N]`.
    pub fn num_variables(&self) -> usize {
        self.def.horizon * self.model.nq()
    }

    pub fn unactuated(&self) -> &[usize] {
        &self.unactuated
    }

    /// Control weights with the penalty weight on unactuated coordinates.
    pub fn effective_r(&self) -> &DVector<f64> {
        &self.r_effective
    }

    fn state_weights(&self, k: usize) -> (&DVector<f64>, &DVector<f64>, f64) {
        if k == self.def.horizon {
            (&self.def.qf_weights, &self.def.vf_weights, 1.0)
        } else {
            (&self.def.q_weights, &self.def.v_weights, self.def.time_step)
        }
    }

    fn check_sequence(&self, q: &[DVector<f64>]) -> Result<()> {
        check_len("q sequence", self.def.horizon + 1, q.len())?;
        for qk in q {
            check_len("q knot", self.model.nq(), qk.len())?;
        }
        Ok(())
    }

    /// `τ_j` and the contact term from the three knots it depends on.
    fn tau_step(
        &self,
        j: usize,
        q_prev: Option<&DVector<f64>>,
        q_cur: &DVector<f64>,
        q_next: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let dt = self.def.time_step;
        let v_cur = match (j, q_prev) {
            (0, _) => self.def.initial.v.clone(),
            (_, Some(qp)) => (q_cur - qp) / dt,
            (_, None) => unreachable!("knot {j} needs its predecessor"),
        };
        let v_next = (q_next - q_cur) / dt;
        let a = (&v_next - v_cur) / dt;
        let kin = self.model.kinematics(q_next, Some(&v_next))?;
        let m = mass_matrix_from(&self.model, &kin);
        let bias = bias_forces_from(&self.model, &kin, &v_next);
        let contact = if self.model.pairs().is_empty() {
            DVector::zeros(self.model.nv())
        } else {
            contact_forces_with(&self.model, &kin, &v_next, &self.contact)?.1
        };
        Ok((m * a + bias - &contact, contact))
    }

    fn tau_at(&self, q: &[DVector<f64>], j: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        let prev = if j == 0 { None } else { Some(&q[j - 1]) };
        self.tau_step(j, prev, &q[j], &q[j + 1])
    }

    /// `τ_0 … τ_{N−1}` together with the generalized contact forces.
    #[allow(clippy::type_complexity)]
    pub fn trajectory_inverse_dynamics(&self, q: &[DVector<f64>]) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        self.check_sequence(q)?;
        let pairs: Vec<_> = (0..self.def.horizon)
            .into_par_iter()
            .map(|j| self.tau_at(q, j))
            .collect::<Result<_>>()?;
        Ok(pairs.into_iter().unzip())
    }

    /// Per-pair contact forces acting during step `k` (evaluated at `k + 1`).
    pub fn pair_forces(&self, vars: &TrajectoryVars, k: usize) -> Result<Vec<PairForce>> {
        let kin = self.model.kinematics(&vars.q[k + 1], Some(&vars.v[k + 1]))?;
        Ok(contact_forces_with(&self.model, &kin, &vars.v[k + 1], &self.contact)?.0)
    }

    /// Full evaluation of the derived trajectories. `q[0]` is overwritten by
    /// the initial condition.
    pub fn evaluate(&self, mut q: Vec<DVector<f64>>) -> Result<TrajectoryVars> {
        self.check_sequence(&q)?;
        q[0] = self.def.initial.q.clone();
        let v = velocities_from_positions(&q, &self.def.initial.v, self.def.time_step);
        let a = accelerations_from_velocities(&v, self.def.time_step);
        let (tau, contact) = self.trajectory_inverse_dynamics(&q)?;
        Ok(TrajectoryVars { q, v, a, tau, contact })
    }

    fn state_cost(&self, vars: &TrajectoryVars, k: usize) -> f64 {
        let (wq, wv, scale) = self.state_weights(k);
        let nom = &self.def.nominal[k];
        let eq = &vars.q[k] - &nom.q;
        let ev = &vars.v[k] - &nom.v;
        0.5 * scale * (eq.component_mul(&eq).dot(wq) + ev.component_mul(&ev).dot(wv))
    }

    fn control_cost(&self, vars: &TrajectoryVars, k: usize) -> f64 {
        let t = &vars.tau[k];
        0.5 * self.def.time_step * t.component_mul(t).dot(&self.r_effective)
    }

    /// Total cost `L`, summed in knot order.
    pub fn total_cost(&self, vars: &TrajectoryVars) -> f64 {
        let n = self.def.horizon;
        let mut cost = 0.0;
        for k in 0..n {
            cost += self.state_cost(vars, k) + self.control_cost(vars, k);
        }
        cost + self.state_cost(vars, n)
    }

    /// Least-squares residual with `L = ½‖r‖²`: state blocks for knots
    /// `0 … N`, then generalized-force blocks for steps `0 … N−1`.
    pub fn residual(&self, vars: &TrajectoryVars) -> DVector<f64> {
        let n = self.def.horizon;
        let nv = self.model.nv();
        let mut r = DVector::zeros((n + 1) * 2 * nv + n * nv);
        let mut row = 0;
        for k in 0..=n {
            let (wq, wv, scale) = self.state_weights(k);
            let nom = &self.def.nominal[k];
            for i in 0..nv {
                r[row + i] = (scale * wq[i]).sqrt() * (vars.q[k][i] - nom.q[i]);
                r[row + nv + i] = (scale * wv[i]).sqrt() * (vars.v[k][i] - nom.v[i]);
            }
            row += 2 * nv;
        }
        for k in 0..n {
            for i in 0..nv {
                r[row + i] = (self.def.time_step * self.r_effective[i]).sqrt() * vars.tau[k][i];
            }
            row += nv;
        }
        r
    }

    /// Unactuated rows of every `τ_k`, concatenated in step order.
    pub fn unactuated_constraint(&self, vars: &TrajectoryVars) -> DVector<f64> {
        let u = &self.unactuated;
        DVector::from_iterator(
            vars.tau.len() * u.len(),
            vars.tau.iter().flat_map(|t| u.iter().map(move |&i| t[i])),
        )
    }

    /// Forward-difference inverse-dynamics derivatives, one knot at a time,
    /// re-evaluating only the three affected `τ` entries per perturbation.
    pub fn fd_inverse_dynamics_derivatives(&self, vars: &TrajectoryVars) -> Result<DerivativeCache> {
        let n = self.def.horizon;
        let nv = self.model.nv();
        let dt = self.def.time_step;
        let q = &vars.q;
        let eps = f64::EPSILON.sqrt();
        let blocks: Vec<_> = (1..=n)
            .into_par_iter()
            .map(|k| -> Result<[Option<DMatrix<f64>>; 3]> {
                let steps: Vec<usize> = (k - 1..=k + 1).filter(|&j| j < n).collect();
                let mut out: [Option<DMatrix<f64>>; 3] = [None, None, None];
                for &j in &steps {
                    out[j + 1 - k] = Some(DMatrix::zeros(nv, nv));
                }
                let mut qk = q[k].clone();
                for i in 0..nv {
                    let h = eps * q[k][i].abs().max(1.0);
                    qk[i] = q[k][i] + h;
                    let h = qk[i] - q[k][i];
                    for &j in &steps {
                        let pick = |idx: usize| if idx == k { &qk } else { &q[idx] };
                        let prev = if j == 0 { None } else { Some(pick(j - 1)) };
                        let (tau, _) = self.tau_step(j, prev, pick(j), pick(j + 1))?;
                        let block = out[j + 1 - k].as_mut().expect("allocated above");
                        block.set_column(i, &((tau - &vars.tau[j]) / h));
                    }
                    qk[i] = q[k][i];
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let eye = DMatrix::<f64>::identity(nv, nv);
        let mut cache = DerivativeCache {
            q: q.clone(),
            dv_cur: vec![&eye / dt; n],
            dv_next: (1..=n).map(|k| (k < n).then(|| -&eye / dt)).collect(),
            dtau_prev: Vec::with_capacity(n),
            dtau_cur: Vec::with_capacity(n),
            dtau_next: Vec::with_capacity(n),
        };
        for [prev, cur, next] in blocks {
            cache.dtau_prev.push(prev.expect("τ_{k−1} exists for every free knot"));
            cache.dtau_cur.push(cur);
            cache.dtau_next.push(next);
        }
        Ok(cache)
    }

    /// Cost gradient with respect to `[q_1; …; q_N]`.
    pub fn cost_gradient(&self, cache: &DerivativeCache, vars: &TrajectoryVars) -> Result<DVector<f64>> {
        if !cache.is_fresh_for(&vars.q) {
            return Err(Error::StaleCache);
        }
        let n = self.def.horizon;
        let nv = self.model.nv();
        let dt = self.def.time_step;
        let mut g = DVector::zeros(n * nv);
        for k in 1..=n {
            let i = k - 1;
            let (wq, wv, scale) = self.state_weights(k);
            let nom = &self.def.nominal[k];
            let mut gk = (&vars.q[k] - &nom.q).component_mul(wq) * scale;
            let ev = (&vars.v[k] - &nom.v).component_mul(wv) * scale;
            gk += cache.dv_cur[i].tr_mul(&ev);
            if let Some(dv) = &cache.dv_next[i] {
                let (_, wv1, scale1) = self.state_weights(k + 1);
                let ev1 = (&vars.v[k + 1] - &self.def.nominal[k + 1].v).component_mul(wv1) * scale1;
                gk += dv.tr_mul(&ev1);
            }
            for j in k - 1..=k + 1 {
                if let Some(d) = cache.dtau(j, k) {
                    let rt = vars.tau[j].component_mul(&self.r_effective) * dt;
                    gk += d.tr_mul(&rt);
                }
            }
            g.rows_mut(i * nv, nv).copy_from(&gk);
        }
        Ok(g)
    }

    /// Gauss–Newton Hessian over `[q_1; …; q_N]`: block `(k, s)` collects
    /// `Σ (∂r/∂q_k)ᵀ W (∂r/∂q_s)` over the residual blocks both knots touch.
    pub fn gauss_newton_hessian(&self, cache: &DerivativeCache) -> Result<BlockPentaMatrix> {
        let n = self.def.horizon;
        let nv = self.model.nv();
        let dt = self.def.time_step;
        if cache.dv_cur.len() != n {
            return Err(Error::StaleCache);
        }
        let r = DMatrix::from_diagonal(&(&self.r_effective * dt));
        let weighted = |d: &DMatrix<f64>, w: &DMatrix<f64>, e: &DMatrix<f64>| d.transpose() * w * e;
        let diag = |w: &DVector<f64>, s: f64| DMatrix::from_diagonal(&(w * s));
        let mut h = BlockPentaMatrix::zeros(n, nv);
        for k in 1..=n {
            let i = k - 1;
            let (wq, wv, scale) = self.state_weights(k);
            let wv = diag(wv, scale);
            let mut d = diag(wq, scale) + weighted(&cache.dv_cur[i], &wv, &cache.dv_cur[i]);
            if let Some(dv) = &cache.dv_next[i] {
                let (_, wv1, scale1) = self.state_weights(k + 1);
                d += weighted(dv, &diag(wv1, scale1), dv);
            }
            for j in k - 1..=k + 1 {
                if let Some(t) = cache.dtau(j, k) {
                    d += weighted(t, &r, t);
                }
            }
            *h.diag_block_mut(i) = (&d + d.transpose()) * 0.5;

            if k >= 2 {
                // H[k, k−1]: shared residuals are v_k, τ_{k−1} and τ_k.
                let dv_prev = cache.dv_next[i - 1].as_ref().expect("k − 1 < N");
                let mut b = weighted(&cache.dv_cur[i], &wv, dv_prev);
                for j in k - 1..=k {
                    if let (Some(tk), Some(tp)) = (cache.dtau(j, k), cache.dtau(j, k - 1)) {
                        b += weighted(tk, &r, tp);
                    }
                }
                *h.sub1_block_mut(i) = b;
            }
            if k >= 3 {
                // H[k, k−2]: only τ_{k−1} sees both knots.
                if let (Some(tk), Some(tp)) = (cache.dtau(k - 1, k), cache.dtau(k - 1, k - 2)) {
                    *h.sub2_block_mut(i) = weighted(tk, &r, tp);
                }
            }
        }
        Ok(h)
    }

    /// Jacobian of `h(q)` with respect to `[q_1; …; q_N]`, dense.
    pub fn constraint_jacobian(&self, cache: &DerivativeCache) -> DMatrix<f64> {
        let n = self.def.horizon;
        let nv = self.model.nv();
        let u = &self.unactuated;
        let mut a = DMatrix::zeros(n * u.len(), n * nv);
        for j in 0..n {
            for k in (j.max(1) - if j >= 1 { 1 } else { 0 }).max(1)..=(j + 1).min(n) {
                if let Some(d) = cache.dtau(j, k) {
                    for (r, &row) in u.iter().enumerate() {
                        for c in 0..nv {
                            a[(j * u.len() + r, (k - 1) * nv + c)] = d[(row, c)];
                        }
                    }
                }
            }
        }
        a
    }

    /// Packs `[q_1; …; q_N]`.
    pub fn flatten(&self, q: &[DVector<f64>]) -> DVector<f64> {
        let nv = self.model.nq();
        DVector::from_iterator(
            self.num_variables(),
            q[1..]
                .iter()
                .flat_map(|x| x.iter().copied())
                .take(self.def.horizon * nv),
        )
    }

    /// `q` with `[q_1; …; q_N]` advanced by `step`.
    pub fn apply_step(&self, q: &[DVector<f64>], step: &DVector<f64>) -> Vec<DVector<f64>> {
        let nv = self.model.nq();
        let mut out = q.to_vec();
        for (k, qk) in out.iter_mut().enumerate().skip(1) {
            *qk += step.rows((k - 1) * nv, nv);
        }
        out
    }
}
