//! Small symmetric-eigen helpers for the constants pipeline.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{matmul_tn, seeded_rng, Matrix, Rng};

/// Residual threshold, relative to the eigenvalue magnitude.
pub const POWER_TOLERANCE: f64 = 1e-12;
/// Hard cap on power iterations.
pub const POWER_MAX_ITERS: usize = 200_000;

const START_SEED: u64 = 0x005e_ed0f_e19e;

fn mat_vec(h: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..h.rows())
        .map(|r| h.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
///
/// The iteration is run on `h + shift·I`, which leaves eigenvectors unchanged and keeps the
/// dominant eigenvalue well separated from any negative part of the spectrum.
pub fn power_max_eig(h: &Matrix) -> Result<f64> {
    let n = h.rows();
    if n != h.cols() {
        return Err(Error::Shape { op: "power_max_eig", left: h.shape(), right: h.shape() });
    }
    let mut rng = seeded_rng(START_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    normalize(&mut v);
    let mut rho = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let hv = mat_vec(h, &v);
        rho = hv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        let residual = hv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - rho * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= POWER_TOLERANCE * rho.abs().max(1.0) {
            return Ok(rho);
        }
        let mut next = hv;
        if normalize(&mut next) == 0.0 {
            return Ok(0.0);
        }
        v = next;
    }
    Ok(rho)
}

/// Smallest eigenvalue of a symmetric PSD matrix, via the spectrum flip `μI − h`.
pub fn power_min_eig(h: &Matrix, mu: f64) -> Result<f64> {
    let flipped = Matrix::identity(h.rows()).scale(mu).sub(h)?;
    Ok(mu - power_max_eig(&flipped)?)
}

/// Spectral norm `‖m‖₂`.
pub fn operator_norm(m: &Matrix) -> Result<f64> {
    Ok(power_max_eig(&matmul_tn(m, m)?)?.max(0.0).sqrt())
}

/// Gram matrix `aᵀa`.
pub fn gram(a: &Matrix) -> Result<Matrix> {
    matmul_tn(a, a)
}

/// Random `n × n` orthogonal matrix by Gram–Schmidt on Gaussian columns.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for q in &cols {
            let proj: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(x, qi)| *x -= proj * qi);
        }
        if normalize(&mut v) > 1e-8 {
            cols.push(v);
        }
    }
    let mut out = Matrix::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for (r, value) in col.iter().enumerate() {
            out.set(r, c, *value);
        }
    }
    out
}
