//! Projected stochastic alternating gradient runs on a [`QuadraticProblem`].

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::problem::QuadraticProblem;
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Matrix, Rng};

/// Euclidean ball `‖w − center‖ ≤ radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct BallConstraint {
    center: Matrix,
    radius: f64,
}

impl BallConstraint {
    pub fn new(center: Matrix, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Argument(format!("ball radius must be positive, got {radius}")));
        }
        Ok(BallConstraint { center, radius })
    }

    pub fn center(&self) -> &Matrix {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

/// Balls of radius `r_d/2` around each block of `start`.
pub fn balls_around(problem: &QuadraticProblem, start: &[Matrix]) -> Result<Vec<BallConstraint>> {
    start
        .iter()
        .zip(problem.radii())
        .map(|(c, r)| BallConstraint::new(c.clone(), r / 2.0))
        .collect()
}

/// Nearest point of the ball to `z`.
pub fn ball_project(z: &Matrix, ball: &BallConstraint) -> Result<Matrix> {
    let offset = z.sub(&ball.center)?;
    let dist = offset.frobenius_norm();
    if dist <= ball.radius {
        return Ok(z.clone());
    }
    let mut out = ball.center.clone();
    out.axpy(ball.radius / dist, &offset)?;
    Ok(out)
}

/// Generalized gradient AM operator `Q_d = w_d + η ∇_d J`, with `J = −f`.
pub fn am_operator(problem: &QuadraticProblem, ws: &[Matrix], d: usize, eta: f64) -> Result<Matrix> {
    if !(eta > 0.0) {
        return Err(Error::Argument(format!("eta must be positive, got {eta}")));
    }
    if d >= problem.blocks() {
        return Err(Error::Argument(format!("block {d} out of range for {} blocks", problem.blocks())));
    }
    let mut q = ws[d].clone();
    q.axpy(-eta, &problem.gradient(ws, d)?)?;
    Ok(q)
}

/// Step-size schedule `η̄^t`.
#[derive(Debug, Clone, PartialEq)]
pub enum EtaSchedule {
    Constant(f64),
    /// Explicit values; the last one repeats once exhausted.
    Sequence(Vec<f64>),
}

impl EtaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            EtaSchedule::Constant(eta) => *eta,
            EtaSchedule::Sequence(v) => v[t.min(v.len() - 1)],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            EtaSchedule::Constant(eta) => *eta > 0.0 && eta.is_finite(),
            EtaSchedule::Sequence(v) => !v.is_empty() && v.iter().all(|e| *e > 0.0 && e.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument("step schedule must be nonempty with positive finite values".into()))
        }
    }
}

/// Order in which blocks see each other's updates within one sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sweep {
    /// Block `d` sees blocks `< d` at `t+1` and blocks `> d` at `t`.
    #[default]
    GaussSeidel,
    /// Every block sees the sweep's starting point.
    Jacobi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmRunConfig {
    pub steps: usize,
    pub schedule: EtaSchedule,
    pub sweep: Sweep,
}

/// Per-iteration error of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTrace {
    /// `Σ_d ‖Δ_d^t‖²` for `t = 0..=steps`.
    pub errors: Vec<f64>,
    /// `η̄^t` for `t = 0..steps`.
    pub etas: Vec<f64>,
    /// Fitted exponential decay rate of the transient.
    pub decay: f64,
    /// Mean of the last 20% of `errors`.
    pub plateau: f64,
}

impl ErrorTrace {
    pub fn from_errors(errors: Vec<f64>, etas: Vec<f64>) -> Self {
        let plateau = tail_mean(&errors);
        let decay = fit_decay(&errors, plateau);
        ErrorTrace { errors, etas, decay, plateau }
    }
}

/// Mean of the last 20% (at least one entry).
pub fn tail_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let k = (values.len() / 5).max(1);
    values[values.len() - k..].iter().sum::<f64>() / k as f64
}

/// Least-squares slope of `−ln e_t` over the transient, i.e. points above twice the plateau.
fn fit_decay(errors: &[f64], plateau: f64) -> f64 {
    let floor = (2.0 * plateau).max(1e-300);
    let pts: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .take_while(|(_, e)| **e > floor)
        .map(|(t, e)| (t as f64, e.ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    -sxy / sxx
}

/// Point with `‖w_d − w_d*‖ = distance` in a random direction per block.
pub fn start_at_distance(problem: &QuadraticProblem, distance: f64, rng: &mut Rng) -> Result<Vec<Matrix>> {
    problem
        .optimum()
        .iter()
        .map(|star| {
            let dir: Vec<f64> = (0..star.rows()).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let mut w = star.clone();
            w.data_mut().iter_mut().zip(&dir).for_each(|(x, v)| *x += distance * v / norm);
            Ok(w)
        })
        .collect()
}

/// Uniform sample from `‖w − center‖ ≤ radius`.
pub fn sample_in_ball(center: &Matrix, radius: f64, rng: &mut Rng) -> Matrix {
    let n = center.len();
    let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    let mut w = center.clone();
    w.data_mut().iter_mut().zip(&dir).for_each(|(x, v)| *x += r * v / norm);
    w
}

/// Runs `W_d^{t+1} = Π_d(W_d^t − η̄^t ∇_d f¹(…))` from `start`, one fresh noise draw per block update.
pub fn stochastic_am_run(
    problem: &QuadraticProblem,
    balls: &[BallConstraint],
    start: &[Matrix],
    config: &AmRunConfig,
    rng: &mut Rng,
) -> Result<ErrorTrace> {
    config.schedule.validate()?;
    if balls.len() != problem.blocks() {
        return Err(Error::Argument(format!("{} balls for {} blocks", balls.len(), problem.blocks())));
    }
    let mut ws = start.to_vec();
    let mut errors = Vec::with_capacity(config.steps + 1);
    let mut etas = Vec::with_capacity(config.steps);
    errors.push(problem.error(&ws)?);
    for t in 0..config.steps {
        let eta = config.schedule.at(t);
        let frozen = match config.sweep {
            Sweep::Jacobi => Some(ws.clone()),
            Sweep::GaussSeidel => None,
        };
        for d in 0..problem.blocks() {
            let at = frozen.as_deref().unwrap_or(&ws);
            let g = problem.sample_gradient(at, d, rng)?;
            let mut z = ws[d].clone();
            z.axpy(-eta, &g)?;
            ws[d] = ball_project(&z, &balls[d])?;
        }
        etas.push(eta);
        errors.push(problem.error(&ws)?);
    }
    Ok(ErrorTrace::from_errors(errors, etas))
}

/// Per-step Monte-Carlo mean and standard error of the error trace over independent seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarlo {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub runs: usize,
    pub etas: Vec<f64>,
}

impl MonteCarlo {
    pub fn plateau(&self) -> f64 {
        tail_mean(&self.mean)
    }
}

/// Runs one independently seeded trajectory per seed, all starting from `start`.
pub fn monte_carlo(
    problem: &QuadraticProblem,
    balls: &[BallConstraint],
    start: &[Matrix],
    config: &AmRunConfig,
    seeds: &[u64],
) -> Result<MonteCarlo> {
    if seeds.len() < 2 {
        return Err(Error::Argument("Monte-Carlo estimation needs at least two seeds".into()));
    }
    let traces = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || {
                    let mut rng = seeded_rng(seed);
                    stochastic_am_run(problem, balls, start, config, &mut rng)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("Monte-Carlo worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let len = config.steps + 1;
    let n = traces.len() as f64;
    let mut mean = vec![0.0; len];
    let mut std_err = vec![0.0; len];
    for t in 0..len {
        let m = traces.iter().map(|tr| tr.errors[t]).sum::<f64>() / n;
        let var = traces.iter().map(|tr| (tr.errors[t] - m).powi(2)).sum::<f64>() / (n - 1.0);
        mean[t] = m;
        std_err[t] = (var / n).sqrt();
    }
    Ok(MonteCarlo { mean, std_err, runs: traces.len(), etas: traces[0].etas.clone() })
}
