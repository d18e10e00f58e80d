//! Dense symmetric-matrix helpers shared by the kernel and the samplers.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{NngpError, Result};

/// Largest |m_ij - m_ji| divided by the largest |m_ij| (0 for a zero matrix).
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let k = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

pub fn max_diagonal(m: &DMatrix<f64>) -> f64 {
    m.diagonal().iter().copied().fold(0.0, f64::max)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky-type factor `L` with `L Lᵀ = m` for a small positive
/// semidefinite `m` stored row-major in `m` (k×k). Pivots at or below
/// `tol · max diag` are treated as zero and their column is dropped, so
/// singular matrices (duplicate inputs, dead ReLU units) factor cleanly.
/// Returns the lower triangle row-major.
pub fn semidefinite_cholesky(m: &[f64], k: usize, tol: f64) -> Vec<f64> {
    debug_assert_eq!(m.len(), k * k);
    let scale = (0..k).map(|i| m[i * k + i]).fold(0.0, f64::max);
    let cut = tol * scale;
    let mut l = vec![0.0; k * k];
    for j in 0..k {
        let mut d = m[j * k + j];
        for p in 0..j {
            d -= l[j * k + p] * l[j * k + p];
        }
        if d <= cut {
            continue;
        }
        let d = d.sqrt();
        l[j * k + j] = d;
        for i in (j + 1)..k {
            let mut s = m[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            l[i * k + j] = s / d;
        }
    }
    l
}

/// How a sampling factor was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMethod {
    /// Cholesky of `Σ + jitter · max diag · I`.
    Cholesky { jitter: f64 },
    /// `V diag(sqrt(max(λ, 0)))` from the eigendecomposition.
    EigenClip { min_eigenvalue: f64 },
}

/// A square factor `A` with `A Aᵀ ≈ Σ`, used to turn iid standard normals
/// into draws from `N(0, Σ)`.
#[derive(Debug, Clone)]
pub struct SamplingFactor {
    pub factor: DMatrix<f64>,
    pub method: FactorMethod,
}

/// Factor `sigma` for sampling: Cholesky with jitter escalating by 10×
/// from `jitter` up to `max_jitter` (both relative to the largest diagonal
/// entry), then an eigenvalue-clipped fallback. Matrices with an
/// eigenvalue below `-indefinite_tol · max diag` are rejected.
pub fn sampling_factor(
    sigma: &DMatrix<f64>,
    jitter: f64,
    max_jitter: f64,
    indefinite_tol: f64,
) -> Result<SamplingFactor> {
    let k = sigma.nrows();
    let scale = max_diagonal(sigma);
    if scale == 0.0 {
        return Ok(SamplingFactor {
            factor: DMatrix::zeros(k, k),
            method: FactorMethod::Cholesky { jitter: 0.0 },
        });
    }
    let mut j = jitter;
    loop {
        let mut m = sigma.clone();
        for i in 0..k {
            m[(i, i)] += j * scale;
        }
        if let Some(ch) = m.cholesky() {
            return Ok(SamplingFactor {
                factor: ch.l(),
                method: FactorMethod::Cholesky { jitter: j },
            });
        }
        if j >= max_jitter {
            break;
        }
        j = if j == 0.0 { 1e-12 } else { (j * 10.0).min(max_jitter) };
    }
    let eig = SymmetricEigen::new(sigma.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -indefinite_tol * scale {
        return Err(NngpError::Numeric(format!(
            "covariance is indefinite: min eigenvalue {min:e} (max diagonal {scale:e})"
        )));
    }
    let mut factor = eig.eigenvectors;
    for (c, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        factor.column_mut(c).scale_mut(s);
    }
    Ok(SamplingFactor {
        factor,
        method: FactorMethod::EigenClip { min_eigenvalue: min },
    })
}
