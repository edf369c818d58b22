//! Sampled contraction checks and the Monte-Carlo error-recursion check.

use std::fmt::Write as _;
use std::path::Path;

use super::problem::QuadraticProblem;
use super::run::{am_operator, monte_carlo, sample_in_ball, AmRunConfig, BallConstraint, EtaSchedule, MonteCarlo, Sweep};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Relative slack below which a sampled inequality counts as violated.
pub const CONTRACTION_REL_TOL: f64 = 1e-9;
/// Number of Monte-Carlo standard errors allowed in the recursion check.
pub const RECURSION_SE_MULTIPLIER: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContractionForm {
    /// `‖Q_d − w_d*‖² ≤ (1 − 2ημλ/(μ+λ))‖Δ_d‖²`, other blocks at the optimum.
    Squared,
    /// `‖Q_d − w_d*‖ ≤ max(|1−ηλ|, |1−ημ|)‖Δ_d‖`, other blocks at the optimum.
    Spectral,
    /// `‖Q_d − w_d*‖ ≤ √(1−ξη)‖Δ_d‖ + ηγ Σ_{i≠d}‖Δ_i‖`.
    CrossBlock,
}

impl std::fmt::Display for ContractionForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContractionForm::Squared => "squared",
            ContractionForm::Spectral => "spectral",
            ContractionForm::CrossBlock => "cross_block",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractivityViolation {
    pub form: ContractionForm,
    pub trial: usize,
    pub lhs: f64,
    pub rhs: f64,
    /// Block values of the witness point.
    pub point: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractivityReport {
    pub block: usize,
    pub eta: f64,
    pub trials: usize,
    /// Smallest `(rhs − lhs)/scale` seen per form, in [`ContractionForm`] order.
    pub worst_slack: [f64; 3],
    /// Points where the unsquared factor `1 − 2ημλ/(μ+λ)` fails (informational).
    pub literal_unsquared_failures: usize,
    /// Points where the factor `(1 − ξη)` in place of `√(1−ξη)` fails (informational).
    pub literal_cross_block_failures: usize,
    pub violations: Vec<ContractivityViolation>,
}

impl ContractivityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "block {} eta {:.6} trials {}: {}",
            self.block,
            self.eta,
            self.trials,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        let _ = writeln!(
            s,
            "  worst relative slack: squared {:.3e}, spectral {:.3e}, cross_block {:.3e}",
            self.worst_slack[0], self.worst_slack[1], self.worst_slack[2]
        );
        let _ = writeln!(
            s,
            "  literal unsquared factors fail at {} (single block) and {} (cross block) points",
            self.literal_unsquared_failures, self.literal_cross_block_failures
        );
        for v in self.violations.iter().take(5) {
            let _ = writeln!(s, "  violation {} at trial {}: lhs {:.6e} > rhs {:.6e}, point {:?}", v.form, v.trial, v.lhs, v.rhs, v.point);
        }
        s
    }
}

fn relative_slack(lhs: f64, rhs: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        (rhs - lhs) / scale
    } else {
        rhs - lhs
    }
}

/// Samples `trials` points with `w_i` uniform in `B(r_i, w_i*)` and checks the contraction
/// inequalities for block `d` at step `eta`.
pub fn contractivity_check(
    problem: &QuadraticProblem,
    d: usize,
    eta: f64,
    trials: usize,
    rng: &mut Rng,
) -> Result<ContractivityReport> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Argument(format!("eta must be positive, got {eta}")));
    }
    if d >= problem.blocks() {
        return Err(Error::Argument(format!("block {d} out of range for {} blocks", problem.blocks())));
    }
    let c = problem.constants();
    let (lo, hi) = (c.lambda[d], c.mu[d]);
    let contraction_sq = 1.0 - 2.0 * eta * hi * lo / (hi + lo);
    let spectral = (1.0 - eta * lo).abs().max((1.0 - eta * hi).abs());
    let cross_factor = (1.0 - c.xi * eta).max(0.0).sqrt();
    let literal_cross = 1.0 - c.xi * eta;
    let star = problem.optimum();

    let mut report = ContractivityReport {
        block: d,
        eta,
        trials,
        worst_slack: [f64::INFINITY; 3],
        literal_unsquared_failures: 0,
        literal_cross_block_failures: 0,
        violations: Vec::new(),
    };
    for trial in 0..trials {
        let ws: Vec<Matrix> = star
            .iter()
            .zip(problem.radii())
            .map(|(s, r)| sample_in_ball(s, *r, rng))
            .collect();
        let dist: Vec<f64> = ws
            .iter()
            .zip(star)
            .map(|(w, s)| w.sub(s).map(|x| x.frobenius_norm()))
            .collect::<Result<_>>()?;

        let mut local = star.to_vec();
        local[d] = ws[d].clone();
        let q_local = am_operator(problem, &local, d, eta)?.sub(&star[d])?.frobenius_norm();
        let q_full = am_operator(problem, &ws, d, eta)?.sub(&star[d])?.frobenius_norm();
        let others: f64 = dist.iter().enumerate().filter(|(i, _)| *i != d).map(|(_, x)| x).sum();

        let checks = [
            (ContractionForm::Squared, q_local * q_local, contraction_sq * dist[d] * dist[d], dist[d] * dist[d]),
            (ContractionForm::Spectral, q_local, spectral * dist[d], dist[d]),
            (
                ContractionForm::CrossBlock,
                q_full,
                cross_factor * dist[d] + eta * c.gamma * others,
                dist[d] + others,
            ),
        ];
        for (k, (form, lhs, rhs, scale)) in checks.into_iter().enumerate() {
            let slack = relative_slack(lhs, rhs, scale);
            report.worst_slack[k] = report.worst_slack[k].min(slack);
            if slack < -CONTRACTION_REL_TOL {
                report.violations.push(ContractivityViolation {
                    form,
                    trial,
                    lhs,
                    rhs,
                    point: ws.iter().map(|w| w.data().to_vec()).collect(),
                });
            }
        }
        if q_local > contraction_sq * dist[d] * (1.0 + CONTRACTION_REL_TOL) {
            report.literal_unsquared_failures += 1;
        }
        if q_full > (literal_cross * dist[d] + eta * c.gamma * others) * (1.0 + CONTRACTION_REL_TOL) {
            report.literal_cross_block_failures += 1;
        }
    }
    Ok(report)
}

/// One-step recursion coefficients at step `eta`: `(ratio, noise)` with
/// `ratio = (1 − 2ηξ + 2ηδ)/(1 − ηδ)`, `noise = η²σ²/(1 − ηδ)`, `δ = γ(L−1)`.
pub fn recursion_coefficients(problem: &QuadraticProblem, eta: f64) -> Result<(f64, f64)> {
    if !problem.coupling_admissible() {
        let c = problem.constants();
        return Err(Error::Argument(format!(
            "coupling too strong: γ = {} is not below 2ξ/(3(L−1)) with ξ = {}",
            c.gamma, c.xi
        )));
    }
    if !(eta > 0.0 && eta < problem.step_upper_bound()) {
        return Err(Error::Argument(format!(
            "eta {eta} outside (0, 1/(γ(L−1))) = (0, {})",
            problem.step_upper_bound()
        )));
    }
    let xi = problem.constants().xi;
    let delta = problem.delta();
    let denom = 1.0 - eta * delta;
    Ok(((1.0 - 2.0 * eta * xi + 2.0 * eta * delta) / denom, eta * eta * problem.sigma_sq() / denom))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionRow {
    pub t: usize,
    pub mean_err: f64,
    pub bound_rhs: f64,
    pub slack: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionReport {
    pub sigma_sq: f64,
    /// `(ratio, noise)` at the first step.
    pub coefficients: (f64, f64),
    pub runs: usize,
    pub rows: Vec<RecursionRow>,
    /// Steps `t` where `mean_err > bound_rhs + tolerance`.
    pub violations: Vec<usize>,
}

impl RecursionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["t", "mean_err", "bound_rhs", "slack"]).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.write_record([r.t.to_string(), r.mean_err.to_string(), r.bound_rhs.to_string(), r.slack.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let worst = self
            .rows
            .iter()
            .skip(1)
            .map(|r| (r.slack + r.tolerance, r.t))
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
        let mut s = String::new();
        let _ = writeln!(
            s,
            "recursion over {} runs, {} steps: {}",
            self.runs,
            self.rows.len().saturating_sub(1),
            if self.passed() { "PASS" } else { "FAIL" }
        );
        let _ = writeln!(
            s,
            "  ratio {:.6}, noise term {:.6e}, sigma^2 {:.6e}",
            self.coefficients.0, self.coefficients.1, self.sigma_sq
        );
        let _ = writeln!(s, "  tightest step t={} with slack+tolerance {:.6e}", worst.1, worst.0);
        if let Some(t) = self.violations.first() {
            let _ = writeln!(s, "  first violation at t={t} ({} total)", self.violations.len());
        }
        s
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), message: e.to_string() }
}

/// Checks `E[e_{t+1}] ≤ ratio·E[e_t] + noise` at every step of a Monte-Carlo estimate.
pub fn recursion_check(problem: &QuadraticProblem, mc: &MonteCarlo) -> Result<RecursionReport> {
    recursion_check_scaled(problem, mc, 1.0)
}

/// [`recursion_check`] with the noise term multiplied by `noise_scale`.
pub fn recursion_check_scaled(problem: &QuadraticProblem, mc: &MonteCarlo, noise_scale: f64) -> Result<RecursionReport> {
    let coefficients = recursion_coefficients(problem, mc.etas.first().copied().unwrap_or(f64::NAN))?;
    let mut rows = Vec::with_capacity(mc.mean.len());
    let mut violations = Vec::new();
    rows.push(RecursionRow { t: 0, mean_err: mc.mean[0], bound_rhs: mc.mean[0], slack: 0.0, tolerance: 0.0 });
    for t in 1..mc.mean.len() {
        let (ratio, noise) = recursion_coefficients(problem, mc.etas[t - 1])?;
        let noise = noise * noise_scale;
        let bound_rhs = ratio * mc.mean[t - 1] + noise;
        let tolerance =
            RECURSION_SE_MULTIPLIER * (mc.std_err[t].powi(2) + ratio.powi(2) * mc.std_err[t - 1].powi(2)).sqrt();
        let slack = bound_rhs - mc.mean[t];
        if slack < -tolerance {
            violations.push(t);
        }
        rows.push(RecursionRow { t, mean_err: mc.mean[t], bound_rhs, slack, tolerance });
    }
    Ok(RecursionReport { sigma_sq: problem.sigma_sq(), coefficients, runs: mc.runs, rows, violations })
}

/// First `t` with `errors[t] > ratio^t · errors[0] · (1 + 1e-9)`, if any.
pub fn geometric_violation(errors: &[f64], ratio: f64) -> Option<usize> {
    let e0 = *errors.first()?;
    errors
        .iter()
        .enumerate()
        .find(|(t, e)| **e > ratio.powi(*t as i32) * e0 * (1.0 + 1e-9))
        .map(|(t, _)| t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauComparison {
    pub eta_large: f64,
    pub eta_small: f64,
    pub plateau_large: f64,
    pub plateau_small: f64,
    /// `plateau_large / plateau_small`.
    pub factor: f64,
}

/// Monte-Carlo plateaus (mean of the last 20% of the mean trace) at two constant steps.
pub fn plateau_comparison(
    problem: &QuadraticProblem,
    balls: &[BallConstraint],
    start: &[Matrix],
    steps: usize,
    eta_large: f64,
    eta_small: f64,
    seeds: &[u64],
) -> Result<PlateauComparison> {
    let run = |eta: f64| {
        let cfg = AmRunConfig { steps, schedule: EtaSchedule::Constant(eta), sweep: Sweep::GaussSeidel };
        monte_carlo(problem, balls, start, &cfg, seeds).map(|mc| mc.plateau())
    };
    let plateau_large = run(eta_large)?;
    let plateau_small = run(eta_small)?;
    Ok(PlateauComparison { eta_large, eta_small, plateau_large, plateau_small, factor: plateau_large / plateau_small })
}
