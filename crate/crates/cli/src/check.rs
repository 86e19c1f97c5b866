//! Verification battery run by `idto check`.

use std::fmt;

use idto_core::banded::BlockPentaMatrix;
use idto_core::contact::{compliance_force, dissipation_factor, friction_force, ContactParams};
use idto_core::dynamics::{forward_dynamics, inverse_dynamics};
use idto_core::problem::{ProblemDefinition, TrajOptProblem};
use idto_core::scenario::Scenario;
use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CommandError;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    /// Worst observed error (or 0/1 for boolean properties).
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value < tolerance,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<30} {:>12.3e} {:>10.1e}  {}",
            self.name,
            self.value,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

const SEED: u64 = 0x1d70;

/// Knot sequence scattered around the initial configuration.
pub fn random_trajectory(rng: &mut impl Rng, problem: &TrajOptProblem, scale: f64) -> Vec<DVector<f64>> {
    let q0 = &problem.def.initial.q;
    (0..=problem.horizon())
        .map(|k| {
            if k == 0 {
                q0.clone()
            } else {
                q0 + DVector::from_fn(q0.len(), |_, _| rng.gen_range(-scale..scale))
            }
        })
        .collect()
}

fn cost_at(problem: &TrajOptProblem, q: &[DVector<f64>], step: &DVector<f64>) -> Result<f64, CommandError> {
    let vars = problem.evaluate(problem.apply_step(q, step))?;
    Ok(problem.total_cost(&vars))
}

/// Central-difference gradient of `total_cost` over the free knots.
pub fn fd_gradient(problem: &TrajOptProblem, q: &[DVector<f64>], h: f64) -> Result<DVector<f64>, CommandError> {
    let n = problem.num_variables();
    let mut g = DVector::zeros(n);
    let mut e = DVector::zeros(n);
    for i in 0..n {
        e[i] = h;
        let plus = cost_at(problem, q, &e)?;
        e[i] = -h;
        let minus = cost_at(problem, q, &e)?;
        e[i] = 0.0;
        g[i] = (plus - minus) / (2.0 * h);
    }
    Ok(g)
}

/// Largest `‖g − g_FD‖ / (1 + ‖g_FD‖)` over `samples` random trajectories.
pub fn gradient_error(problem: &TrajOptProblem, samples: usize, seed: u64) -> Result<f64, CommandError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let q = random_trajectory(&mut rng, problem, 0.05);
        let vars = problem.evaluate(q.clone())?;
        let cache = problem.fd_inverse_dynamics_derivatives(&vars)?;
        let g = problem.cost_gradient(&cache, &vars)?;
        let g_fd = fd_gradient(problem, &q, 1e-6)?;
        worst = worst.max((&g - &g_fd).norm() / (1.0 + g_fd.norm()));
    }
    Ok(worst)
}

/// Copy of `problem` truncated to `horizon` steps.
pub fn truncated(problem: &TrajOptProblem, horizon: usize) -> Result<TrajOptProblem, CommandError> {
    let def = ProblemDefinition {
        horizon,
        nominal: problem.def.nominal[..=horizon].to_vec(),
        ..problem.def.clone()
    };
    Ok(TrajOptProblem::new(problem.model.clone(), problem.contact, def)?)
}

/// Dense residual Jacobian by central differences.
pub fn fd_residual_jacobian(
    problem: &TrajOptProblem,
    q: &[DVector<f64>],
    h: f64,
) -> Result<DMatrix<f64>, CommandError> {
    let n = problem.num_variables();
    let base = problem.residual(&problem.evaluate(q.to_vec())?);
    let mut jac = DMatrix::zeros(base.len(), n);
    let mut e = DVector::zeros(n);
    for i in 0..n {
        e[i] = h;
        let plus = problem.residual(&problem.evaluate(problem.apply_step(q, &e))?);
        e[i] = -h;
        let minus = problem.residual(&problem.evaluate(problem.apply_step(q, &e))?);
        e[i] = 0.0;
        jac.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

/// Relative Frobenius distance between the assembled Gauss-Newton Hessian and
/// `JᵣᵀJᵣ` on a three-step copy of the problem.
pub fn hessian_error(problem: &TrajOptProblem, seed: u64) -> Result<f64, CommandError> {
    let small = truncated(problem, 3.min(problem.horizon()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_trajectory(&mut rng, &small, 0.05);
    let vars = small.evaluate(q.clone())?;
    let cache = small.fd_inverse_dynamics_derivatives(&vars)?;
    let h = small.gauss_newton_hessian(&cache)?.to_dense();
    let j = fd_residual_jacobian(&small, &q, 1e-6)?;
    let dense = j.transpose() * &j;
    Ok((&h - &dense).norm() / dense.norm().max(1e-300))
}

/// Random SPD block-pentadiagonal matrix: random off-diagonal blocks, with
/// diagonal blocks made strictly row diagonally dominant.
pub fn random_spd_blocks(rng: &mut impl Rng, count: usize, n: usize) -> BlockPentaMatrix {
    let mut h = BlockPentaMatrix::zeros(count, n);
    for k in 1..count {
        *h.sub1_block_mut(k) = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    }
    for k in 2..count {
        *h.sub2_block_mut(k) = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    }
    for k in 0..count {
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut d: DMatrix<f64> = &g * g.transpose();
        let dense_rows = h.to_dense();
        for i in 0..n {
            let row = k * n + i;
            let off: f64 = (0..h.dim())
                .filter(|&c| c / n != k)
                .map(|c| dense_rows[(row, c)].abs())
                .sum();
            let own: f64 = (0..n).filter(|&c| c != i).map(|c| d[(i, c)].abs()).sum();
            d[(i, i)] += off + own + rng.gen_range(0.1..1.0);
        }
        *h.diag_block_mut(k) = d;
    }
    h
}

/// Relative gap between the banded solve and a dense Cholesky solve.
pub fn banded_vs_dense(h: &BlockPentaMatrix, b: &DVector<f64>) -> Result<f64, CommandError> {
    let x = h.factorize()?.solve(b)?;
    let dense = h
        .to_dense()
        .cholesky()
        .ok_or_else(|| CommandError::input("dense Cholesky failed on an SPD test matrix"))?
        .solve(b);
    Ok((&x - &dense).norm() / dense.norm().max(1e-300))
}

/// Backward error `‖Hx − b‖ / (‖H‖ ‖x‖ + ‖b‖)` of the banded solve.
pub fn banded_backward_error(h: &BlockPentaMatrix, b: &DVector<f64>) -> Result<f64, CommandError> {
    let x = h.factorize()?.solve(b)?;
    let r = h.mul_vec(&x)? - b;
    Ok(r.norm() / (h.to_dense().norm() * x.norm() + b.norm()))
}

fn contact_checks(label: &str, params: &ContactParams, rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let sigma = params.smoothing_m;
    let k = params.stiffness_n_per_m;
    let c0 = compliance_force(0.0, params);
    let expected = sigma * k * std::f64::consts::LN_2;
    let mut out = vec![CheckResult::below(
        format!("{label} compliance at zero"),
        (c0 - expected).abs() / expected,
        1e-14,
    )];

    // One-sided slopes must agree at the two knots of the dissipation spline.
    let vd = params.dissipation_velocity_m_per_s;
    let mut kink: f64 = 0.0;
    for x in [0.0, 2.0 * vd] {
        let e = 1e-7 * vd;
        let left = (dissipation_factor(x, params) - dissipation_factor(x - e, params)) / e;
        let right = (dissipation_factor(x + e, params) - dissipation_factor(x, params)) / e;
        let gap = (dissipation_factor(x + 1e-12 * vd, params) - dissipation_factor(x - 1e-12 * vd, params)).abs();
        kink = kink.max((left - right).abs() * vd).max(gap);
    }
    out.push(CheckResult::below(format!("{label} dissipation C1"), kink, 1e-5));

    let mu = params.friction_coefficient;
    let mut violation: f64 = 0.0;
    for _ in 0..10_000 {
        let fn_ = rng.gen_range(0.0..1e3);
        let vt = Vector2::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let ft = friction_force(vt, fn_, params);
        let excess = if fn_ > 0.0 && ft.norm() >= mu * fn_ { 1.0 } else { 0.0 };
        violation = violation.max(excess).max(ft.dot(&vt).max(0.0));
    }
    out.push(CheckResult {
        name: format!("{label} friction cone"),
        value: violation,
        tolerance: 0.0,
        passed: violation == 0.0,
    });

    let deep = compliance_force(-1e6 * sigma, params);
    let deep_expected = 1e6 * sigma * k;
    out.push(CheckResult::below(
        format!("{label} deep penetration"),
        (deep - deep_expected).abs() / deep_expected,
        1e-9,
    ));
    out
}

fn round_trip_error(problem: &TrajOptProblem, rng: &mut ChaCha8Rng) -> Result<f64, CommandError> {
    let model = &problem.model;
    let nv = model.nv();
    let zero = DVector::zeros(nv);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let q = DVector::from_fn(model.nq(), |_, _| rng.gen_range(-1.0..1.0));
        let v = DVector::from_fn(nv, |_, _| rng.gen_range(-2.0..2.0));
        let a = DVector::from_fn(nv, |_, _| rng.gen_range(-5.0..5.0));
        let tau = inverse_dynamics(model, &q, &v, &a, &zero)?;
        let back = forward_dynamics(model, &q, &v, &tau)?;
        worst = worst.max((&back - &a).norm() / (1.0 + a.norm()));
    }
    Ok(worst)
}

/// Runs every check against a built scenario.
pub fn run_checks(scenario: &Scenario) -> Result<Vec<CheckResult>, CommandError> {
    let problem = &scenario.problem;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut out = vec![
        CheckResult::below("gradient vs central FD", gradient_error(problem, 10, SEED)?, 1e-4),
        CheckResult::below("hessian vs dense JrTJr", hessian_error(problem, SEED)?, 1e-5),
    ];

    let vars = problem.evaluate(random_trajectory(&mut rng, problem, 0.05))?;
    let cache = problem.fd_inverse_dynamics_derivatives(&vars)?;
    let h = problem.gauss_newton_hessian(&cache)?;
    let b = problem.cost_gradient(&cache, &vars)?;
    out.push(CheckResult::below(
        "banded solve residual",
        banded_backward_error(&h, &b)?,
        1e-12,
    ));
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let count = rng.gen_range(2..=problem.horizon().max(2));
        let spd = random_spd_blocks(&mut rng, count, problem.nv());
        let rhs = DVector::from_fn(spd.dim(), |_, _| rng.gen_range(-1.0..1.0));
        worst = worst.max(banded_vs_dense(&spd, &rhs)?);
    }
    out.push(CheckResult::below("banded vs dense cholesky", worst, 1e-10));

    out.extend(contact_checks("planner", &problem.contact, &mut rng));
    out.extend(contact_checks("simulator", &scenario.simulator.contact, &mut rng));
    out.push(CheckResult::below(
        "inverse/forward round trip",
        round_trip_error(problem, &mut rng)?,
        1e-10,
    ));
    Ok(out)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<30} {:>12} {:>10}  result\n", "check", "error", "tol");
    for r in results {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_blocks_are_symmetric_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (count, n) in [(1, 1), (2, 3), (7, 4)] {
            let h = random_spd_blocks(&mut rng, count, n).to_dense();
            assert_eq!(h, h.transpose());
            assert!(h.cholesky().is_some());
        }
    }

    #[test]
    fn truncation_keeps_the_prefix_of_the_nominal() {
        let sc = idto_core::scenario::builtin::spinner().build().unwrap();
        let small = truncated(&sc.problem, 3).unwrap();
        assert_eq!(small.horizon(), 3);
        assert_eq!(small.def.nominal[..], sc.problem.def.nominal[..4]);
    }

    #[test]
    fn table_marks_failures() {
        let rows = [
            CheckResult::below("a", 1e-9, 1e-6),
            CheckResult::below("b", f64::NAN, 1e-6),
        ];
        let table = format_table(&rows);
        assert!(table.lines().nth(1).unwrap().ends_with("PASS"));
        assert!(table.lines().nth(2).unwrap().ends_with("FAIL"));
    }
}
