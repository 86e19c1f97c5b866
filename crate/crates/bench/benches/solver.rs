use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use idto_bench::spinner;
use idto_core::problem::ConstraintMode;
use idto_core::solver::{iterate, SolverOptions, SolverState};

fn derivatives(c: &mut Criterion) {
    let mut group = c.benchmark_group("fd_derivatives");
    for n in [10, 20, 40, 80] {
        let (problem, guess) = spinner(n, ConstraintMode::Penalty);
        let vars = problem.evaluate(guess).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| problem.fd_inverse_dynamics_derivatives(black_box(&vars)).unwrap())
        });
    }
    group.finish();
}

fn factorization(c: &mut Criterion) {
    let mut group = c.benchmark_group("hessian_factorize");
    for n in [10, 20, 40, 80] {
        let (problem, guess) = spinner(n, ConstraintMode::Penalty);
        let vars = problem.evaluate(guess).unwrap();
        let cache = problem.fd_inverse_dynamics_derivatives(&vars).unwrap();
        let h = problem.gauss_newton_hessian(&cache).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| black_box(&h).factorize().unwrap())
        });
    }
    group.finish();
}

fn solver_iteration(c: &mut Criterion) {
    let mut group = c.benchmark_group("solver_iteration");
    let options = SolverOptions::default();
    for (label, mode) in [
        ("penalty", ConstraintMode::Penalty),
        ("lagrange", ConstraintMode::Lagrange),
    ] {
        for n in [10, 20, 40, 80] {
            let (problem, guess) = spinner(n, mode);
            let state = SolverState::new(&problem, guess, options.initial_radius).unwrap();
            group.bench_with_input(BenchmarkId::new(label, n), &n, |b, _| {
                b.iter_batched(
                    || state.clone(),
                    |mut s| iterate(&problem, &mut s, &options, 0).unwrap().0,
                    criterion::BatchSize::SmallInput,
                )
            });
        }
    }
    group.finish();
}

criterion_group!(benches, derivatives, factorization, solver_iteration);
criterion_main!(benches);
