//! Empirical checks of the convergence analysis on multi-block least-squares problems.
//!
//! Provides the gradient AM operator, ball projection, sampled contraction checks, and a
//! Monte-Carlo check of the one-step error recursion under projected stochastic AM.

mod checks;
pub mod linalg;
mod problem;
mod run;

pub use checks::{
    contractivity_check, geometric_violation, plateau_comparison, recursion_check, recursion_check_scaled, recursion_coefficients,
    ContractionForm, ContractivityReport, ContractivityViolation, PlateauComparison, RecursionReport, RecursionRow,
    CONTRACTION_REL_TOL, RECURSION_SE_MULTIPLIER,
};
pub use problem::{coupled_isotropic, decoupled, diagonal, random_quadratic, ProblemConstants, QuadraticProblem};
pub use run::{
    am_operator, ball_project, balls_around, monte_carlo, sample_in_ball, start_at_distance, stochastic_am_run,
    tail_mean, AmRunConfig, BallConstraint, ErrorTrace, EtaSchedule, MonteCarlo, Sweep,
};
