//! Multi-block least-squares problems with a known optimum.
//!
//! The objective is `f(W) = ½ E‖Σ_d A_d w_d − y‖²` with `y = Σ_d A_d w_d* + ε`,
//! `ε ~ N(0, s²I)`, and the concave reformulation is `J = −f`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::linalg::{gram, operator_norm, power_max_eig, power_min_eig, random_orthogonal};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_tn, Matrix, Rng};

/// Constants of the convergence analysis, measured from the design matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConstants {
    /// Strong-concavity modulus per block: smallest eigenvalue of `A_dᵀA_d`.
    pub lambda: Vec<f64>,
    /// Smoothness per block: largest eigenvalue of `A_dᵀA_d`.
    pub mu: Vec<f64>,
    /// Gradient-stability constant per block: `max_{i≠d} ‖A_dᵀA_i‖`.
    pub gamma_d: Vec<f64>,
    /// `cross[d][i] = ‖A_dᵀA_i‖`, with `cross[d][d] = μ_d`.
    pub cross: Vec<Vec<f64>>,
    /// `min_d 2μ_dλ_d/(μ_d+λ_d)`.
    pub xi: f64,
    /// `max_d γ_d`.
    pub gamma: f64,
}

impl ProblemConstants {
    fn measure(design: &[Matrix]) -> Result<Self> {
        let l = design.len();
        let mut lambda = Vec::with_capacity(l);
        let mut mu = Vec::with_capacity(l);
        let mut cross = vec![vec![0.0; l]; l];
        for (d, a) in design.iter().enumerate() {
            let h = gram(a)?;
            let top = power_max_eig(&h)?;
            mu.push(top);
            lambda.push(power_min_eig(&h, top)?.clamp(0.0, top));
            cross[d][d] = top;
        }
        for d in 0..l {
            for i in d + 1..l {
                let norm = operator_norm(&matmul_tn(&design[d], &design[i])?)?;
                cross[d][i] = norm;
                cross[i][d] = norm;
            }
        }
        let gamma_d: Vec<f64> = (0..l)
            .map(|d| (0..l).filter(|&i| i != d).map(|i| cross[d][i]).fold(0.0, f64::max))
            .collect();
        let xi = lambda
            .iter()
            .zip(&mu)
            .map(|(&lo, &hi)| 2.0 * hi * lo / (hi + lo))
            .fold(f64::INFINITY, f64::min);
        let gamma = gamma_d.iter().copied().fold(0.0, f64::max);
        Ok(ProblemConstants { lambda, mu, gamma_d, cross, xi, gamma })
    }
}

/// An `L`-block least-squares problem.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    design: Vec<Matrix>,
    optimum: Vec<Matrix>,
    noise_sd: f64,
    radii: Vec<f64>,
    constants: ProblemConstants,
}

impl QuadraticProblem {
    /// Builds a problem from its design matrices (`m × n_d`), optimum columns (`n_d × 1`),
    /// label noise, and convergence radii `r_d`.
    pub fn new(design: Vec<Matrix>, optimum: Vec<Matrix>, noise_sd: f64, radii: Vec<f64>) -> Result<Self> {
        if design.is_empty() {
            return Err(Error::Argument("a problem needs at least one block".into()));
        }
        if optimum.len() != design.len() || radii.len() != design.len() {
            return Err(Error::Argument(format!(
                "{} blocks but {} optima and {} radii",
                design.len(),
                optimum.len(),
                radii.len()
            )));
        }
        let m = design[0].rows();
        for (a, w) in design.iter().zip(&optimum) {
            if a.rows() != m {
                return Err(Error::Shape { op: "design rows", left: design[0].shape(), right: a.shape() });
            }
            if w.shape() != (a.cols(), 1) {
                return Err(Error::Shape { op: "optimum", left: a.shape(), right: w.shape() });
            }
        }
        if !(noise_sd.is_finite() && noise_sd >= 0.0) {
            return Err(Error::Argument(format!("noise sd must be finite and >= 0, got {noise_sd}")));
        }
        if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Argument("radii must be finite and positive".into()));
        }
        let constants = ProblemConstants::measure(&design)?;
        if let Some(d) = constants.lambda.iter().position(|&lo| lo <= 0.0) {
            return Err(Error::Argument(format!("block {d} is not strongly concave (λ = 0)")));
        }
        Ok(QuadraticProblem { design, optimum, noise_sd, radii, constants })
    }

    pub fn blocks(&self) -> usize {
        self.design.len()
    }

    pub fn design(&self) -> &[Matrix] {
        &self.design
    }

    pub fn optimum(&self) -> &[Matrix] {
        &self.optimum
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    pub fn dims(&self) -> Vec<usize> {
        self.design.iter().map(Matrix::cols).collect()
    }

    /// Same geometry with different label noise.
    pub fn with_noise(&self, noise_sd: f64) -> Result<Self> {
        if !(noise_sd.is_finite() && noise_sd >= 0.0) {
            return Err(Error::Argument(format!("noise sd must be finite and >= 0, got {noise_sd}")));
        }
        Ok(QuadraticProblem { noise_sd, ..self.clone() })
    }

    /// `δ = γ(L − 1)`.
    pub fn delta(&self) -> f64 {
        self.constants.gamma * (self.blocks() as f64 - 1.0)
    }

    /// Largest step for which every per-block operator is contractive: `min_d 2/(μ_d+λ_d)`.
    pub fn step_ceiling(&self) -> f64 {
        let c = &self.constants;
        c.lambda.iter().zip(&c.mu).map(|(lo, hi)| 2.0 / (hi + lo)).fold(f64::INFINITY, f64::min)
    }

    /// Upper step bound `1/(γ(L−1))` (infinite when blocks are decoupled).
    pub fn step_upper_bound(&self) -> f64 {
        let delta = self.delta();
        if delta > 0.0 {
            1.0 / delta
        } else {
            f64::INFINITY
        }
    }

    /// Whether the coupling is weak enough for the error recursion: `γ < 2ξ/(3(L−1))`.
    pub fn coupling_admissible(&self) -> bool {
        self.blocks() == 1 || self.constants.gamma < 2.0 * self.constants.xi / (3.0 * (self.blocks() as f64 - 1.0))
    }

    /// Upper bound on `sup E‖∇_d f¹‖²` over the balls `‖w_i − w_i*‖ ≤ r_i`:
    /// `(Σ_i ‖A_dᵀA_i‖ r_i)² + s²‖A_d‖_F²`.
    pub fn sigma_sq_block(&self, d: usize) -> f64 {
        let drift: f64 = self.constants.cross[d].iter().zip(&self.radii).map(|(c, r)| c * r).sum();
        drift * drift + self.noise_sd.powi(2) * self.design[d].frobenius_norm().powi(2)
    }

    /// `σ² = Σ_d σ_d²`.
    pub fn sigma_sq(&self) -> f64 {
        (0..self.blocks()).map(|d| self.sigma_sq_block(d)).sum()
    }

    fn check_point(&self, ws: &[Matrix]) -> Result<()> {
        if ws.len() != self.blocks() {
            return Err(Error::Argument(format!("expected {} blocks, got {}", self.blocks(), ws.len())));
        }
        for (w, star) in ws.iter().zip(&self.optimum) {
            if w.shape() != star.shape() {
                return Err(Error::Shape { op: "block value", left: star.shape(), right: w.shape() });
            }
        }
        Ok(())
    }

    /// `Σ_i A_i (w_i − w_i*)`.
    pub fn residual(&self, ws: &[Matrix]) -> Result<Matrix> {
        self.check_point(ws)?;
        let mut r = Matrix::zeros(self.design[0].rows(), 1);
        for ((a, w), star) in self.design.iter().zip(ws).zip(&self.optimum) {
            r.axpy(1.0, &matmul(a, &w.sub(star)?)?)?;
        }
        Ok(r)
    }

    /// Population objective, excluding the irreducible noise constant.
    pub fn objective(&self, ws: &[Matrix]) -> Result<f64> {
        Ok(0.5 * self.residual(ws)?.frobenius_norm().powi(2))
    }

    /// `Σ_d ‖w_d − w_d*‖²`.
    pub fn error(&self, ws: &[Matrix]) -> Result<f64> {
        self.check_point(ws)?;
        let mut total = 0.0;
        for (w, star) in ws.iter().zip(&self.optimum) {
            total += w.sub(star)?.frobenius_norm().powi(2);
        }
        Ok(total)
    }

    /// Oracle gradient `∇_d f = A_dᵀ Σ_i A_i Δ_i`.
    pub fn gradient(&self, ws: &[Matrix], d: usize) -> Result<Matrix> {
        matmul_tn(&self.design[d], &self.residual(ws)?)
    }

    /// Single-sample gradient `A_dᵀ(Σ_i A_i Δ_i − ε)` with a fresh noise draw.
    pub fn sample_gradient(&self, ws: &[Matrix], d: usize, rng: &mut Rng) -> Result<Matrix> {
        let mut r = self.residual(ws)?;
        if self.noise_sd > 0.0 {
            let normal = Normal::new(0.0, self.noise_sd).map_err(|e| Error::Argument(e.to_string()))?;
            r.data_mut().iter_mut().for_each(|x| *x -= normal.sample(rng));
        }
        matmul_tn(&self.design[d], &r)
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::new(rows, cols, data).expect("finite gaussian draws")
}

/// Two blocks with `A_dᵀA_d = λI` and `‖A_1ᵀA_2‖ = γ`.
///
/// `A_1 = √λ [I; 0]` and `A_2 = √λ [cosθ·R; sinθ·I]` with `cosθ = γ/λ` and `R` a random rotation.
pub fn coupled_isotropic(
    n: usize,
    lambda: f64,
    gamma: f64,
    noise_sd: f64,
    radius: f64,
    rng: &mut Rng,
) -> Result<QuadraticProblem> {
    if n == 0 || !(lambda > 0.0) || !(0.0..=lambda).contains(&gamma) {
        return Err(Error::Argument(format!(
            "coupled problem needs n >= 1, λ > 0, 0 <= γ <= λ (got n={n}, λ={lambda}, γ={gamma})"
        )));
    }
    let cos = gamma / lambda;
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    let root = lambda.sqrt();
    let rot = random_orthogonal(n, rng);
    let mut a1 = Matrix::zeros(2 * n, n);
    let mut a2 = Matrix::zeros(2 * n, n);
    for i in 0..n {
        a1.set(i, i, root);
        a2.set(n + i, i, root * sin);
        for j in 0..n {
            a2.set(i, j, root * cos * rot.get(i, j));
        }
    }
    let optimum = vec![gaussian(n, 1, 1.0, rng), gaussian(n, 1, 1.0, rng)];
    QuadraticProblem::new(vec![a1, a2], optimum, noise_sd, vec![radius; 2])
}

/// Single block with `A = diag(√eig)`, so `AᵀA = diag(eig)`; optimum at the origin.
pub fn diagonal(eigs: &[f64], noise_sd: f64, radius: f64) -> Result<QuadraticProblem> {
    let n = eigs.len();
    let mut a = Matrix::zeros(n, n);
    for (i, &e) in eigs.iter().enumerate() {
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::Argument(format!("eigenvalues must be positive, got {e}")));
        }
        a.set(i, i, e.sqrt());
    }
    QuadraticProblem::new(vec![a], vec![Matrix::zeros(n, 1)], noise_sd, vec![radius])
}

/// Random Gaussian design with `blocks` blocks of dimension `1..=max_dim` sharing all rows.
pub fn random_quadratic(
    blocks: usize,
    max_dim: usize,
    noise_sd: f64,
    radius: f64,
    rng: &mut Rng,
) -> Result<QuadraticProblem> {
    if blocks == 0 || max_dim == 0 {
        return Err(Error::Argument("blocks and max_dim must be >= 1".into()));
    }
    let dims: Vec<usize> = (0..blocks).map(|_| rng.random_range(1..=max_dim)).collect();
    let m = dims.iter().sum::<usize>() + 4;
    let scale = 1.0 / (m as f64).sqrt();
    let design = dims.iter().map(|&n| gaussian(m, n, scale, rng)).collect();
    let optimum = dims.iter().map(|&n| gaussian(n, 1, 1.0, rng)).collect();
    QuadraticProblem::new(design, optimum, noise_sd, vec![radius; blocks])
}

/// Blocks on disjoint rows, so `γ = 0`.
pub fn decoupled(dims: &[usize], noise_sd: f64, radius: f64, rng: &mut Rng) -> Result<QuadraticProblem> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::Argument("dims must be nonempty and positive".into()));
    }
    let heights: Vec<usize> = dims.iter().map(|n| n + 2).collect();
    let m: usize = heights.iter().sum();
    let mut design = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for (&n, &h) in dims.iter().zip(&heights) {
        let local = gaussian(h, n, 1.0 / (h as f64).sqrt(), rng);
        let mut a = Matrix::zeros(m, n);
        for r in 0..h {
            for c in 0..n {
                a.set(offset + r, c, local.get(r, c));
            }
        }
        design.push(a);
        offset += h;
    }
    let optimum = dims.iter().map(|&n| gaussian(n, 1, 1.0, rng)).collect();
    QuadraticProblem::new(design, optimum, noise_sd, vec![radius; dims.len()])
}
