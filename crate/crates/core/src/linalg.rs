//! Dense symmetric-matrix helpers: Cholesky with failure location,
//! multivariate-normal sampling factors, and eigenvalue-clipping PSD repair.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Lower-triangular Cholesky factor. Fails with the order of the first
/// leading minor that is not positive.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::contract(format!("cholesky of non-square {}x{} matrix", n, m.ncols())));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { minor: j + 1 });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L w = b` for lower-triangular `L`. Entry `i` of the result only
/// depends on the first `i + 1` entries of `b`.
pub fn forward_substitute(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * w[k];
        }
        w[i] = s / l[(i, i)];
    }
    w
}

/// `log det` of `L Lᵀ` from its Cholesky factor.
pub fn log_det_from_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// A factor `F` with `F Fᵀ = cov`, suitable for drawing `μ + F z`.
///
/// Positive-definite inputs get their Cholesky factor; singular PSD inputs
/// fall back to the eigen square root. Matrices with an eigenvalue below
/// `-1e-10 · max(1, max |λ|)` are rejected.
pub fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::contract("covariance must be square"));
    }
    let asym = (cov - cov.transpose()).abs().max();
    if asym > 1e-12 * cov.abs().max().max(1.0) {
        return Err(Error::contract(format!("covariance is not symmetric (max |M - Mᵀ| = {asym:e})")));
    }
    if let Ok(l) = cholesky_lower(cov) {
        return Ok(l);
    }
    let eig = SymmetricEigen::new(symmetrize(cov));
    let scale = eig.eigenvalues.amax().max(1.0);
    let (idx, min) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    if min < -1e-10 * scale {
        return Err(Error::NotPositiveSemidefinite { eigenvalue: min, index: idx });
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Result of clipping a symmetric matrix's spectrum from below.
#[derive(Debug, Clone)]
pub struct PsdRepair {
    pub matrix: DMatrix<f64>,
    /// Number of eigenvalues raised to the floor.
    pub clipped: usize,
    pub floor: f64,
    /// Sum of |λ| over the negative eigenvalues of the input.
    pub negative_mass: f64,
}

/// Symmetrizes `m` and clips eigenvalues below `ε = 1e-10 · trace / d` up to `ε`.
///
/// When every eigenvalue already exceeds the floor the symmetrized matrix is
/// returned untouched.
pub fn repair_psd(m: &DMatrix<f64>) -> PsdRepair {
    let d = m.nrows();
    let sym = symmetrize(m);
    let trace = sym.trace();
    let floor = if trace > 0.0 && trace.is_finite() {
        1e-10 * trace / d as f64
    } else {
        1e-10 * sym.abs().max().max(f64::MIN_POSITIVE)
    };
    let shifted = &sym - DMatrix::<f64>::identity(d, d) * floor;
    if cholesky_lower(&shifted).is_ok() {
        return PsdRepair { matrix: sym, clipped: 0, floor, negative_mass: 0.0 };
    }
    let eig = SymmetricEigen::new(sym);
    let negative_mass = eig.eigenvalues.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let clipped = eig.eigenvalues.iter().filter(|v| **v < floor).count();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    let rebuilt = symmetrize(&(v * DMatrix::from_diagonal(&vals) * v.transpose()));
    PsdRepair { matrix: rebuilt, clipped, floor, negative_mass }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn dvector(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}
