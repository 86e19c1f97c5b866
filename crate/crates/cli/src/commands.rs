//! Implementations of the `optimize`, `mpc` and `check` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use idto_core::mpc::{run_mpc, EpisodeLog};
use idto_core::problem::ConstraintMode;
use idto_core::scenario::{Scenario, ScenarioFile};
use idto_core::solver::{solve, Solution, TerminationReason};
use log::info;

use crate::check::{format_table, run_checks, CheckResult};
use crate::output;
use crate::{with_threads, CommandError, EXIT_DIVERGED, EXIT_FACTORIZATION, EXIT_INPUT};

#[derive(Clone, Debug, Default)]
pub struct OptimizeArgs {
    pub scenario: PathBuf,
    pub mode: Option<ConstraintMode>,
    pub max_iters: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct MpcArgs {
    pub scenario: PathBuf,
    pub episode_seconds: Option<f64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

fn load(path: &Path) -> Result<ScenarioFile, CommandError> {
    ScenarioFile::load(path).map_err(|e| CommandError::input(format!("{}: {e}", path.display())))
}

fn build(file: &ScenarioFile, path: &Path) -> Result<Scenario, CommandError> {
    file.build()
        .map_err(|e| CommandError::input(format!("{}: {e}", path.display())))
}

fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf, CommandError> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Builds the scenario with command-line overrides applied.
pub fn prepare_optimize(args: &OptimizeArgs) -> Result<Scenario, CommandError> {
    let mut file = load(&args.scenario)?;
    if let Some(mode) = args.mode {
        file.problem.constraint_mode = mode;
    }
    if let Some(n) = args.max_iters {
        file.solver.max_iterations = n;
    }
    build(&file, &args.scenario)
}

/// Solves the scenario and writes `convergence.csv`, `timing.csv` and
/// `trajectory.csv`. Factorization exhaustion still writes its outputs
/// before failing with exit code 2.
pub fn optimize(args: &OptimizeArgs) -> Result<Solution, CommandError> {
    let scenario = prepare_optimize(args)?;
    let dir = out_dir(&args.out)?;
    let solution = with_threads(args.threads, || {
        solve(&scenario.problem, scenario.initial_guess.clone(), &scenario.solver)
    })??;
    output::write_solution(&dir, &scenario.problem, &solution)?;
    let last = solution.records.last();
    info!(
        "{}: {} after {} iterations, cost {:.6e}, |h|^2 {:.3e}",
        scenario.name,
        solution.termination.as_str(),
        solution.records.len(),
        last.map_or(f64::NAN, |r| r.cost),
        last.map_or(f64::NAN, |r| r.constraint_violation),
    );
    if solution.termination == TerminationReason::FactorizationFailureExhausted {
        return Err(CommandError {
            code: EXIT_FACTORIZATION,
            message: "solver stopped: Hessian factorization failed repeatedly".into(),
        });
    }
    Ok(solution)
}

/// Runs the closed-loop episode and writes `episode.csv` and `replans.csv`.
/// A simulator divergence keeps the partial log and fails with exit code 3.
pub fn mpc(args: &MpcArgs) -> Result<EpisodeLog, CommandError> {
    let mut file = load(&args.scenario)?;
    let Some(spec) = file.mpc.as_mut() else {
        return Err(CommandError::input(format!(
            "{}: scenario has no [mpc] section",
            args.scenario.display()
        )));
    };
    if let Some(s) = args.episode_seconds {
        spec.episode_seconds = s;
    }
    let scenario = build(&file, &args.scenario)?;
    let (config, gains) = scenario.mpc.clone().expect("mpc section was present");
    let dir = out_dir(&args.out)?;
    let log = with_threads(args.threads, || {
        run_mpc(
            &scenario.problem,
            scenario.initial_guess.clone(),
            &scenario.solver,
            &scenario.simulator,
            &gains,
            &config,
        )
    })??;
    let nv = scenario.problem.nv();
    let summary = output::episode_summary(&log, nv, config.disturbance.map(|d| (d.time_s, d.dof)));
    output::write_episode(&dir.join("episode.csv"), &log, nv, &summary)?;
    output::write_replans(&dir.join("replans.csv"), &log)?;
    for (k, v) in &summary {
        info!("{k} = {v}");
    }
    if let Some(msg) = &log.divergence {
        return Err(CommandError {
            code: EXIT_DIVERGED,
            message: msg.clone(),
        });
    }
    Ok(log)
}

/// Runs the verification battery and prints the table. Any failing row
/// yields exit code 1.
pub fn check(scenario_path: &Path, threads: Option<usize>) -> Result<Vec<CheckResult>, CommandError> {
    let file = load(scenario_path)?;
    let scenario = build(&file, scenario_path)?;
    let results = with_threads(threads, || run_checks(&scenario))??;
    print!("{}", format_table(&results));
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CommandError {
            code: EXIT_INPUT,
            message: format!("{failed} check(s) failed"),
        });
    }
    Ok(results)
}
