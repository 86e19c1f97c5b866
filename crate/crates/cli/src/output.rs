//! CSV export. Every file starts with a `# idto <kind> v<N>` comment line so
//! readers can detect the schema; standard CSV readers should be configured
//! to skip `#` lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use idto_core::contact::contact_forces;
use idto_core::mpc::EpisodeLog;
use idto_core::problem::{TrajOptProblem, TrajectoryVars};
use idto_core::solver::{IterationRecord, Solution};

use crate::CommandError;

pub const TRAJECTORY_SCHEMA: &str = "# idto trajectory v1";
pub const CONVERGENCE_SCHEMA: &str = "# idto convergence v1";
pub const TIMING_SCHEMA: &str = "# idto timing v1";
pub const EPISODE_SCHEMA: &str = "# idto episode v1";
pub const REPLANS_SCHEMA: &str = "# idto replans v1";

pub const CONVERGENCE_HEADER: [&str; 11] = [
    "iteration",
    "cost",
    "constraint_violation",
    "merit",
    "trial_merit",
    "gradient_norm",
    "trust_radius",
    "step_norm",
    "trust_ratio",
    "accepted",
    "step_kind",
];

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn open(path: &Path, schema: &str) -> Result<csv::Writer<BufWriter<File>>, CommandError> {
    let mut file =
        BufWriter::new(File::create(path).map_err(|e| CommandError::input(format!("{}: {e}", path.display())))?);
    writeln!(file, "{schema}")?;
    Ok(csv::Writer::from_writer(file))
}

fn record_fields(r: &IterationRecord) -> Vec<String> {
    vec![
        r.iteration.to_string(),
        num(r.cost),
        num(r.constraint_violation),
        num(r.merit),
        num(r.trial_merit),
        num(r.gradient_norm),
        num(r.trust_radius),
        num(r.step_norm),
        num(r.trust_ratio),
        u8::from(r.accepted).to_string(),
        r.step_kind.as_str().to_string(),
    ]
}

/// Iteration log without wall-clock columns, so identical runs produce
/// identical bytes.
pub fn write_convergence(path: &Path, records: &[IterationRecord]) -> Result<(), CommandError> {
    let mut w = open(path, CONVERGENCE_SCHEMA)?;
    w.write_record(CONVERGENCE_HEADER)?;
    for r in records {
        w.write_record(record_fields(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing(path: &Path, records: &[IterationRecord]) -> Result<(), CommandError> {
    let mut w = open(path, TIMING_SCHEMA)?;
    w.write_record(["iteration", "wall_ms"])?;
    for r in records {
        w.write_record([r.iteration.to_string(), num(r.wall_ms)])?;
    }
    w.flush()?;
    Ok(())
}

fn pair_labels(problem: &TrajOptProblem) -> Vec<String> {
    let prims = problem.model.primitives();
    problem
        .model
        .pairs()
        .iter()
        .map(|&(a, b)| format!("{}_{}", prims[a].name, prims[b].name))
        .collect()
}

/// Knot table: time, `q`, `v`, the generalized force applied over the
/// following step (blank at the final knot) and, per declared pair, signed
/// distance and normal/tangential force evaluated at the knot state.
pub fn write_trajectory(path: &Path, problem: &TrajOptProblem, vars: &TrajectoryVars) -> Result<(), CommandError> {
    let nv = problem.nv();
    let n = problem.horizon();
    let dt = problem.def.time_step;
    let labels = pair_labels(problem);
    let mut w = open(path, TRAJECTORY_SCHEMA)?;
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend((0..nv).map(|i| format!("q{i}")));
    header.extend((0..nv).map(|i| format!("v{i}")));
    header.extend((0..nv).map(|i| format!("tau{i}")));
    for l in &labels {
        header.push(format!("phi_{l}"));
        header.push(format!("fn_{l}"));
        header.push(format!("ft_{l}"));
    }
    w.write_record(&header)?;
    for k in 0..=n {
        let mut row = vec![k.to_string(), num(k as f64 * dt)];
        row.extend(vars.q[k].iter().map(|&x| num(x)));
        row.extend(vars.v[k].iter().map(|&x| num(x)));
        if k < n {
            row.extend(vars.tau[k].iter().map(|&x| num(x)));
        } else {
            row.extend((0..nv).map(|_| String::new()));
        }
        let (forces, _) = contact_forces(&problem.model, &vars.q[k], &vars.v[k], &problem.contact)?;
        for f in forces {
            row.push(num(f.pair.distance));
            row.push(num(f.normal_force));
            row.push(num(f.tangential_force));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes convergence, timing and trajectory files into `dir`.
pub fn write_solution(dir: &Path, problem: &TrajOptProblem, solution: &Solution) -> Result<(), CommandError> {
    write_convergence(&dir.join("convergence.csv"), &solution.records)?;
    write_timing(&dir.join("timing.csv"), &solution.records)?;
    write_trajectory(&dir.join("trajectory.csv"), problem, &solution.vars)
}

/// Summary lines appended to the episode file as `# key = value` comments.
pub fn episode_summary(log: &EpisodeLog, nv: usize, disturbance: Option<(f64, usize)>) -> Vec<(String, String)> {
    let mut out = vec![
        ("samples".to_string(), log.samples.len().to_string()),
        ("replans".to_string(), log.replans.len().to_string()),
        ("mean_solve_ms".to_string(), format!("{:.4}", log.mean_solve_ms())),
    ];
    for i in 0..nv {
        out.push((format!("net_change_q{i}"), num(log.net_change(i))));
    }
    if let Some((time, dof)) = disturbance {
        let recovered = log
            .recovery_time(dof, time, 0.5, 0.05)
            .map_or("none".to_string(), |t| format!("{:.4}", t - time));
        out.push((format!("recovery_after_disturbance_q{dof}_s"), recovered));
    }
    out.push((
        "divergence".to_string(),
        log.divergence.clone().unwrap_or_else(|| "none".to_string()),
    ));
    out
}

pub fn write_episode(
    path: &Path,
    log: &EpisodeLog,
    nv: usize,
    summary: &[(String, String)],
) -> Result<(), CommandError> {
    let mut w = open(path, EPISODE_SCHEMA)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..nv).map(|i| format!("q{i}")));
    header.extend((0..nv).map(|i| format!("v{i}")));
    header.extend((0..nv).map(|i| format!("u{i}")));
    w.write_record(&header)?;
    for s in &log.samples {
        let mut row = vec![num(s.time)];
        row.extend(s.state.q.iter().map(|&x| num(x)));
        row.extend(s.state.v.iter().map(|&x| num(x)));
        row.extend(s.applied.iter().map(|&x| num(x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    let mut file = w
        .into_inner()
        .map_err(|e| CommandError::input(format!("i/o error: {e}")))?;
    for (k, v) in summary {
        writeln!(file, "# {k} = {v}")?;
    }
    file.flush()?;
    Ok(())
}

pub fn write_replans(path: &Path, log: &EpisodeLog) -> Result<(), CommandError> {
    let mut w = open(path, REPLANS_SCHEMA)?;
    let mut header = vec!["t", "shift", "solve_ms"];
    header.extend(CONVERGENCE_HEADER);
    w.write_record(&header)?;
    for r in &log.replans {
        let mut row = vec![num(r.time), r.shift.to_string(), num(r.solve_ms)];
        row.extend(record_fields(&r.record));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip_exactly() {
        for x in [0.1, -1.0 / 3.0, 6.02e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(f64::NAN), "NaN");
    }

    #[test]
    fn empty_episode_summary() {
        let log = EpisodeLog {
            samples: vec![],
            replans: vec![],
            planner_contact: Default::default(),
            simulator_contact: Default::default(),
            divergence: None,
        };
        let summary = episode_summary(&log, 2, Some((1.0, 1)));
        let get = |k: &str| summary.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        assert_eq!(get("samples"), Some("0"));
        assert_eq!(get("net_change_q1"), Some("0e0"));
        assert_eq!(get("recovery_after_disturbance_q1_s"), Some("none"));
        assert_eq!(get("divergence"), Some("none"));
    }
}
