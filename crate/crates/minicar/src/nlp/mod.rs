//! Nonlinear least-squares machinery: a box-constrained Levenberg-Marquardt
//! solver for small dense problems and a Gauss-Newton SQP solver for
//! horizon-structured problems with a banded KKT system.

mod nlls;
mod shooting;

pub use nlls::{solve_nlls, NllsOptions, NllsReport};
pub use shooting::{
    ShootingProblem, SqpOptions, SqpReport, TermEval,
};

/// Why a solver stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    /// First-order optimality and feasibility tolerances met.
    Converged,
    /// Iteration budget exhausted before the tolerances were met.
    MaxIterations,
    /// A lower bound exceeds the matching upper bound.
    InfeasibleBounds,
}

impl SolveStatus {
    pub fn is_converged(&self) -> bool {
        matches!(self, SolveStatus::Converged)
    }
}
