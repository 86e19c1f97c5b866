//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p idto-cli --test acceptance --release`.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use idto_cli::check::{banded_vs_dense, gradient_error, hessian_error, random_spd_blocks};
use idto_cli::commands::{optimize, OptimizeArgs};
use idto_core::banded::BlockPentaMatrix;
use idto_core::contact::{compliance_force, dissipation_factor, friction_force, ContactParams};
use idto_core::mpc::run_mpc;
use idto_core::nalgebra::{DMatrix, DVector, Vector2};
use idto_core::problem::{ConstraintMode, TrajOptProblem};
use idto_core::scenario::{builtin, Scenario, ScenarioFile};
use idto_core::solver::{
    dogleg_step, iterate, lagrange_multipliers, scaling_matrix, solve, trust_ratio_and_update, SolverOptions,
    SolverState, StepKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn spinner_with(mode: ConstraintMode, scaling: bool, iterations: usize) -> Scenario {
    let mut file = builtin::spinner();
    file.problem.constraint_mode = mode;
    file.solver.scaling = scaling;
    file.solver.max_iterations = iterations;
    file.build().unwrap()
}

fn gradient() -> Outcome {
    let sc = builtin::spinner().build().unwrap();
    let start = Instant::now();
    let err = gradient_error(&sc.problem, 10, 7).unwrap();
    let secs = start.elapsed().as_secs_f64();
    (
        err < 1e-4 && secs < 30.0,
        format!("worst relative error {err:.2e} (< 1e-4), {secs:.1} s (< 30 s)"),
    )
}

const LINEAR_SCENARIO: &str = r#"
name = "free_body"
[model]
gravity_m_per_s2 = [0.0, 0.0]
actuated = [0, 1, 2]
[[model.bodies]]
name = "body"
mass_kg = 1.5
inertia_kg_m2 = 0.3
joint = { type = "planar_free" }
[planner_contact]
stiffness_n_per_m = 100.0
smoothing_m = 0.01
friction_coefficient = 0.5
stiction_velocity_m_per_s = 0.05
dissipation_velocity_m_per_s = 0.1
[problem]
horizon_steps = 4
time_step_s = 0.1
q_weights = [1.0, 2.0, 0.5]
v_weights = [0.1, 0.1, 0.3]
qf_weights = [10.0, 10.0, 10.0]
vf_weights = [1.0, 1.0, 1.0]
r_weights = [0.1, 0.2, 0.3]
unactuated_weight = 1.0
initial_q = [0.1, -0.2, 0.3]
initial_v = [0.5, 0.0, -1.0]
[problem.nominal]
type = "constant"
q = [1.0, 0.4, -0.5]
v = [0.0, 0.0, 0.0]
"#;

/// Exact Hessian of a quadratic by second central differences.
fn fd_hessian(problem: &TrajOptProblem, q: &[DVector<f64>], h: f64) -> DMatrix<f64> {
    let n = problem.num_variables();
    let f = |i: usize, si: f64, j: usize, sj: f64| {
        let mut e = DVector::zeros(n);
        e[i] += si * h;
        e[j] += sj * h;
        problem.total_cost(&problem.evaluate(problem.apply_step(q, &e)).unwrap())
    };
    DMatrix::from_fn(n, n, |i, j| {
        (f(i, 1.0, j, 1.0) - f(i, 1.0, j, -1.0) - f(i, -1.0, j, 1.0) + f(i, -1.0, j, -1.0)) / (4.0 * h * h)
    })
}

fn hessian() -> Outcome {
    let sc = builtin::spinner().build().unwrap();
    let dense_err = hessian_error(&sc.problem, 11).unwrap();

    let linear = ScenarioFile::from_toml(LINEAR_SCENARIO)
        .unwrap()
        .build()
        .unwrap()
        .problem;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q: Vec<_> = (0..=linear.horizon())
        .map(|_| DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let vars = linear.evaluate(q.clone()).unwrap();
    let cache = linear.fd_inverse_dynamics_derivatives(&vars).unwrap();
    let h = linear.gauss_newton_hessian(&cache).unwrap().to_dense();
    let exact = fd_hessian(&linear, &vars.q, 1e-2);
    let exact_err = (&h - &exact).norm() / exact.norm();
    (
        dense_err < 1e-5 && exact_err < 1e-6,
        format!(
            "3-step spinner vs JrTJr {dense_err:.2e} (< 1e-5), linear problem vs FD Hessian {exact_err:.2e} (< 1e-6)"
        ),
    )
}

fn banded() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let count = rng.gen_range(1..=40);
        let n = rng.gen_range(1..=8);
        let h: BlockPentaMatrix = random_spd_blocks(&mut rng, count, n);
        let b = DVector::from_fn(h.dim(), |_, _| rng.gen_range(-1.0..1.0));
        worst = worst.max(banded_vs_dense(&h, &b).unwrap());
    }
    (
        worst < 1e-10,
        format!("worst relative gap vs dense Cholesky over 100 instances {worst:.2e} (< 1e-10)"),
    )
}

fn contact() -> Outcome {
    let params = builtin::spinner().planner_contact;
    let sigma_k = params.smoothing_m * params.stiffness_n_per_m;
    let at_zero = compliance_force(0.0, &params) == sigma_k * std::f64::consts::LN_2;

    let vd = params.dissipation_velocity_m_per_s;
    let mut kink: f64 = 0.0;
    for x in [0.0, 2.0 * vd] {
        for e in [1e-4, 1e-5, 1e-6].map(|s| s * vd) {
            let left = (dissipation_factor(x, &params) - dissipation_factor(x - e, &params)) / e;
            let right = (dissipation_factor(x + e, &params) - dissipation_factor(x, &params)) / e;
            // One-sided slopes differ by O(e) for a C¹ function.
            kink = kink.max((left - right).abs() * vd / (e / vd));
        }
    }
    let smooth = kink < 2.0;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cone = true;
    for _ in 0..10_000 {
        let p = ContactParams {
            friction_coefficient: rng.gen_range(0.05..2.0),
            stiction_velocity_m_per_s: rng.gen_range(1e-3..1.0),
            ..params
        };
        let fn_ = rng.gen_range(1e-6..1e4);
        let vt = Vector2::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let ft = friction_force(vt, fn_, &p);
        cone &= ft.norm() < p.friction_coefficient * fn_ && ft.dot(&vt) <= 0.0;
    }
    let deep = compliance_force(-1e6 * params.smoothing_m, &params);
    let finite = deep.is_finite() && (deep / (1e6 * sigma_k) - 1.0).abs() < 1e-9;
    (
        at_zero && smooth && cone && finite,
        format!("c(0) exact: {at_zero}, C1 at knots: {smooth} (scaled kink {kink:.2e}), cone/dissipation on 1e4 states: {cone}, finite at -1e6 sigma: {finite}"),
    )
}

fn dogleg() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let options = SolverOptions::default();

    let mut bound_ok = true;
    let mut newton_ok = true;
    for _ in 0..200 {
        let count = rng.gen_range(1..=10);
        let n = rng.gen_range(1..=4);
        let h = random_spd_blocks(&mut rng, count, n);
        let g = DVector::from_fn(h.dim(), |_, _| rng.gen_range(-10.0..10.0));
        let fact = h.factorize().unwrap();
        let d = scaling_matrix(&h, rng.gen_bool(0.5)).unwrap();
        let radius = 10f64.powf(rng.gen_range(-4.0..2.0));
        let s = dogleg_step(&g, &h, &fact, &d, radius).unwrap();
        bound_ok &= s.step.component_div(&d).norm() <= radius * (1.0 + 1e-12);

        let newton = -fact.solve(&g).unwrap();
        let big = dogleg_step(&g, &h, &fact, &d, 2.0 * newton.component_div(&d).norm() + 1.0).unwrap();
        newton_ok &= big.kind == StepKind::FullNewton && big.step == newton;
    }

    // 2-D oracle: H = diag(1, 10), g = (1, 1), unscaled.
    let h = BlockPentaMatrix::from_dense(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 10.0])), 2);
    let fact = h.factorize().unwrap();
    let g = DVector::from_vec(vec![1.0, 1.0]);
    let ones = DVector::from_element(2, 1.0);
    let gg: f64 = 2.0;
    let ghg: f64 = 11.0;
    let cauchy = [-gg / ghg, -gg / ghg];
    let newton: [f64; 2] = [-1.0, -0.1];
    let radius: f64 = 0.5;
    let diff = [newton[0] - cauchy[0], newton[1] - cauchy[1]];
    let a = diff[0] * diff[0] + diff[1] * diff[1];
    let b = 2.0 * (cauchy[0] * diff[0] + cauchy[1] * diff[1]);
    let c = cauchy[0] * cauchy[0] + cauchy[1] * cauchy[1] - radius * radius;
    let t = (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
    let expected = [cauchy[0] + t * diff[0], cauchy[1] + t * diff[1]];
    let s = dogleg_step(&g, &h, &fact, &ones, radius).unwrap();
    let oracle_err = ((s.step[0] - expected[0]).powi(2) + (s.step[1] - expected[1]).powi(2)).sqrt();
    let oracle_ok = oracle_err < 1e-10 && s.kind == StepKind::DoglegInterpolation;

    // ρ sequence: 0.1 shrinks, 0.5 holds, 0.9 on the boundary grows,
    // 0.9 inside holds, growth is capped.
    let cases = [
        (0.1, true, 1.0, 0.25),
        (0.5, true, 1.0, 1.0),
        (0.9, true, 1.0, 2.0),
        (0.9, false, 1.0, 1.0),
        (0.9, true, 80.0, 100.0),
        (-1.0, true, 1.0, 0.25),
    ];
    let rules_ok = cases.iter().all(|&(rho, boundary, radius, expect)| {
        let (accept, new_radius, got) = trust_ratio_and_update(10.0, 10.0 - rho, 1.0, radius, boundary, &options);
        new_radius == expect && accept == (rho > 0.0) && (got - rho).abs() < 1e-12
    });
    (
        bound_ok && newton_ok && oracle_ok && rules_ok,
        format!("radius bound: {bound_ok}, exact Newton inside: {newton_ok}, 2-D oracle error {oracle_err:.1e}, radius rules: {rules_ok}"),
    )
}

fn kkt() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for m in [1, 3, 8, 20] {
        for _ in 0..5 {
            let h = random_spd_blocks(&mut rng, 10, 3);
            let n = h.dim();
            let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let g = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let c = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
            let fact = h.factorize().unwrap();
            let lambda = lagrange_multipliers(&fact, &a, &g, &c).unwrap();
            let p = -fact.solve(&(&g + a.tr_mul(&lambda))).unwrap();

            let mut kkt = DMatrix::zeros(n + m, n + m);
            kkt.view_mut((0, 0), (n, n)).copy_from(&h.to_dense());
            kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
            kkt.view_mut((n, 0), (m, n)).copy_from(&a);
            let mut rhs = DVector::zeros(n + m);
            rhs.rows_mut(0, n).copy_from(&(-&g));
            rhs.rows_mut(n, m).copy_from(&(-&c));
            let mut sol = DVector::zeros(n + m);
            sol.rows_mut(0, n).copy_from(&p);
            sol.rows_mut(n, m).copy_from(&lambda);
            let oracle = kkt.clone().lu().solve(&rhs).unwrap();
            let residual = (&kkt * &sol - &rhs).norm() / rhs.norm();
            let gap = (&sol - &oracle).norm() / oracle.norm();
            worst = worst.max(residual).max(gap);
        }
    }
    (
        worst < 1e-9,
        format!("worst KKT residual / gap to dense solve {worst:.2e} (< 1e-9), up to 20 constraints"),
    )
}

fn penalty_vs_lm() -> Outcome {
    let start = Instant::now();
    let mut last = vec![];
    for mode in [ConstraintMode::Penalty, ConstraintMode::Lagrange] {
        let sc = spinner_with(mode, true, 500);
        let sol = single_threaded(|| solve(&sc.problem, sc.initial_guess.clone(), &sc.solver)).unwrap();
        let vars = &sol.vars;
        last.push((
            sc.problem.total_cost(vars),
            sc.problem.unactuated_constraint(vars).norm_squared(),
            sol.records.len(),
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let (pen, lm) = (last[0], last[1]);
    (
        lm.1 < pen.1 && lm.0 <= pen.0 && secs < 300.0,
        format!(
            "penalty cost {:.4} |h|^2 {:.3e} ({} iters); LM cost {:.4} |h|^2 {:.3e} ({} iters); {secs:.1} s",
            pen.0, pen.1, pen.2, lm.0, lm.1, lm.2
        ),
    )
}

fn cost_at_iteration(mode: ConstraintMode, scaling: bool, iteration: usize) -> f64 {
    let sc = spinner_with(mode, scaling, iteration);
    let sol = solve(&sc.problem, sc.initial_guess.clone(), &sc.solver).unwrap();
    sc.problem.total_cost(&sol.vars)
}

fn scaling() -> Outcome {
    let mode = builtin::spinner().problem.constraint_mode;
    let on = cost_at_iteration(mode, true, 100);
    let off = cost_at_iteration(mode, false, 100);
    let other = match mode {
        ConstraintMode::Penalty => ConstraintMode::Lagrange,
        ConstraintMode::Lagrange => ConstraintMode::Penalty,
    };
    let on2 = cost_at_iteration(other, true, 100);
    let off2 = cost_at_iteration(other, false, 100);
    (
        on <= 0.5 * off,
        format!(
            "shipped spinner ({mode:?}) at iteration 100: scaled {on:.4} vs unscaled {off:.4} (need <= 0.5x); {other:?}: scaled {on2:.4} vs unscaled {off2:.4}"
        ),
    )
}

/// Re-runs the solver one iteration at a time and checks each accepted step
/// against an independent evaluation: cost in penalty mode, merit with the
/// multipliers of the starting iterate in LM mode.
fn monotone_run(mut file: ScenarioFile, mode: ConstraintMode, iterations: usize) -> (usize, usize) {
    file.problem.constraint_mode = mode;
    let sc = file.build().unwrap();
    let problem = &sc.problem;
    let options = &sc.solver;
    let mut state = SolverState::new(problem, sc.initial_guess.clone(), options.initial_radius).unwrap();
    let (mut accepted, mut violations) = (0, 0);
    for i in 0..iterations {
        let before = state.vars.clone();
        let lambda = if mode == ConstraintMode::Lagrange {
            let cache = problem.fd_inverse_dynamics_derivatives(&before).unwrap();
            let hess = problem.gauss_newton_hessian(&cache).unwrap();
            let g = problem.cost_gradient(&cache, &before).unwrap();
            let a = problem.constraint_jacobian(&cache);
            hess.factorize()
                .ok()
                .map(|f| lagrange_multipliers(&f, &a, &g, &problem.unactuated_constraint(&before)).unwrap())
        } else {
            None
        };
        let value = |vars| {
            let cost = problem.total_cost(vars);
            match &lambda {
                Some(l) => cost + problem.unactuated_constraint(vars).dot(l),
                None => cost,
            }
        };
        let (record, outcome) = iterate(problem, &mut state, options, i).unwrap();
        if record.accepted {
            accepted += 1;
            if value(&state.vars) >= value(&before) || value(&state.vars).is_nan() {
                violations += 1;
            }
        }
        if matches!(outcome, idto_core::solver::IterationOutcome::Terminate(_)) {
            break;
        }
    }
    (accepted, violations)
}

fn monotonicity() -> Outcome {
    let mut ok = true;
    let mut parts = vec![];
    for (name, text) in builtin::all() {
        for (label, mode) in [("penalty", ConstraintMode::Penalty), ("lm", ConstraintMode::Lagrange)] {
            let file = ScenarioFile::from_toml(text).unwrap();
            let (accepted, violations) = monotone_run(file, mode, 100);
            ok &= violations == 0 && accepted > 0;
            parts.push(format!(
                "{name}/{label} {accepted} accepted, {violations} non-decreasing"
            ));
        }
    }
    (ok, parts.join("; "))
}

fn mpc() -> Outcome {
    let sc = builtin::spinner().build().unwrap();
    let (config, gains) = sc.mpc.clone().unwrap();
    let log = run_mpc(
        &sc.problem,
        sc.initial_guess.clone(),
        &sc.solver,
        &sc.simulator,
        &gains,
        &config,
    )
    .unwrap();
    let d = config.disturbance.unwrap();
    let net = log.net_change(d.dof);
    let recovery = log.recovery_time(d.dof, d.time_s, 0.5, 0.05).map(|t| t - d.time_s);
    let recovered = recovery.is_some_and(|r| r <= 2.0);
    (
        log.divergence.is_none() && config.episode_seconds == 10.0 && net >= 2.0 && recovered,
        format!(
            "10 s episode, {} replans: net rotation {net:.3} rad (>= 2), recovery after {:+} rad/s kick {} (<= 2 s)",
            log.replans.len(),
            d.velocity_change,
            recovery.map_or("never".to_string(), |r| format!("{r:.3} s"))
        ),
    )
}

fn iteration_ms(horizon: usize, mode: ConstraintMode) -> f64 {
    let mut file = builtin::spinner();
    file.problem.horizon_steps = horizon;
    file.problem.constraint_mode = mode;
    let sc = file.build().unwrap();
    let base = SolverState::new(&sc.problem, sc.initial_guess.clone(), sc.solver.initial_radius).unwrap();
    let mut samples: Vec<f64> = (0..9)
        .map(|_| {
            let mut state = base.clone();
            let start = Instant::now();
            iterate(&sc.problem, &mut state, &sc.solver, 0).unwrap();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

fn timing() -> Outcome {
    single_threaded(|| {
        let shipped = iteration_ms(40, builtin::spinner().problem.constraint_mode);
        let t: Vec<f64> = [10, 20, 40, 80]
            .iter()
            .map(|&n| iteration_ms(n, ConstraintMode::Penalty))
            .collect();
        let low = (t[2] - t[0]) / 30.0;
        let high = (t[3] - t[2]) / 40.0;
        let ratio = low.max(high) / low.min(high);
        (
            shipped < 50.0 && t[2] < 50.0 && low > 0.0 && high > 0.0 && ratio <= 1.6,
            format!(
                "N=40 iteration {shipped:.2} ms shipped mode, {:.2} ms penalty (< 50 ms); penalty N=10/20/40/80: {:.2}/{:.2}/{:.2}/{:.2} ms, slope ratio {ratio:.2} (<= 1.6)",
                t[2], t[0], t[1], t[2], t[3]
            ),
        )
    })
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spinner.toml");
    fs::write(&path, builtin::spinner().to_toml()).unwrap();
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).max(4);
    let mut logs = vec![];
    for (mode, t) in [
        (ConstraintMode::Penalty, 1),
        (ConstraintMode::Penalty, threads),
        (ConstraintMode::Lagrange, 1),
        (ConstraintMode::Lagrange, threads),
    ] {
        let out = dir.path().join(format!("{mode:?}-{t}"));
        optimize(&OptimizeArgs {
            scenario: path.clone(),
            mode: Some(mode),
            max_iters: Some(60),
            out: Some(out.clone()),
            threads: Some(t),
        })
        .unwrap();
        logs.push(fs::read(out.join("convergence.csv")).unwrap());
    }
    let same = logs[0] == logs[1] && logs[2] == logs[3];
    (
        same,
        format!("convergence.csv identical for --threads 1 vs {threads}: {same} (penalty and LM, 60 iterations)"),
    )
}

fn main() -> ExitCode {
    // libtest-style flags passed by `cargo test` are ignored.
    let criteria: [Criterion; 12] = [
        ("gradient correctness", gradient),
        ("hessian correctness", hessian),
        ("banded algebra", banded),
        ("contact model properties", contact),
        ("dogleg / trust region contract", dogleg),
        ("KKT consistency", kkt),
        ("penalty vs LM open loop", penalty_vs_lm),
        ("diagonal scaling benefit", scaling),
        ("monotone accepted steps", monotonicity),
        ("MPC closed loop", mpc),
        ("timing sanity", timing),
        ("determinism across thread counts", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = f();
        let secs = start.elapsed().as_secs_f64();
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {name}: {detail} [{secs:.1} s]",
            i + 1,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
