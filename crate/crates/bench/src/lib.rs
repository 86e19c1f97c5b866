//! Fixtures shared by the benchmarks.

use idto_core::nalgebra::DVector;
use idto_core::problem::{ConstraintMode, TrajOptProblem};
use idto_core::scenario::builtin;

/// Shipped spinner with its horizon replaced, plus the scenario's initial
/// guess.
pub fn spinner(horizon: usize, mode: ConstraintMode) -> (TrajOptProblem, Vec<DVector<f64>>) {
    let mut file = builtin::spinner();
    file.problem.horizon_steps = horizon;
    file.problem.constraint_mode = mode;
    let sc = file.build().expect("shipped spinner scenario builds");
    (sc.problem, sc.initial_guess)
}
