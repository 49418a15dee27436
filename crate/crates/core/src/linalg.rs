use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{LgssError, Result};

pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

pub fn is_zero(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| *v == 0.0)
}

pub fn chol(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    m.clone().cholesky().ok_or_else(|| LgssError::NotPositiveDefinite(what.to_string()))
}

pub fn logdet_pd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let c = chol(m, what)?;
    Ok(2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn inv_pd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(sym(&chol(m, what)?.inverse()))
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    sym(m).symmetric_eigenvalues().min()
}

/// Factor `L` with `L L' = m` for a symmetric PSD (possibly singular) matrix.
pub fn psd_factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if !is_symmetric(m, 1e-10) {
        return Err(LgssError::InvalidModel(format!("{what} is not symmetric")));
    }
    let eig = sym(m).symmetric_eigen();
    let scale = m.amax().max(1.0);
    if eig.eigenvalues.min() < -1e-10 * scale {
        return Err(LgssError::NotPositiveDefinite(format!("{what} has a negative eigenvalue")));
    }
    let mut l = eig.eigenvectors.clone();
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    Ok(l)
}

pub fn is_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    psd_factor(m, what).map(|_| ())
}

/// Number of free entries of a symmetric `n x n` matrix.
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position pairs `(i, j)`, `i <= j`, in column-major upper-triangle order.
pub fn svec_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(svec_len(n));
    for j in 0..n {
        for i in 0..=j {
            out.push((i, j));
        }
    }
    out
}

pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(svec_len(m.nrows()), svec_pairs(m.nrows()).into_iter().map(|(i, j)| m[(i, j)]))
}

pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for (k, (i, j)) in svec_pairs(n).into_iter().enumerate() {
        m[(i, j)] = v[k];
        m[(j, i)] = v[k];
    }
    m
}

/// Symmetric unit direction for svec slot `(i, j)`.
pub fn sym_unit(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    m[(i, j)] = 1.0;
    m[(j, i)] = 1.0;
    m
}

/// Solves `P - A' P A = Q` (requires spectral radius of `A` below one).
pub fn discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let kron = at.kronecker(&at);
    let sys = DMatrix::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| LgssError::Numerical("singular Lyapunov operator".into()))?;
    Ok(sym(&DMatrix::from_column_slice(n, n, sol.as_slice())))
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    if a.nrows() == 1 {
        return a[(0, 0)].abs();
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = m.clone().svd(false, false).singular_values;
    let smin = s.min();
    if smin == 0.0 {
        f64::INFINITY
    } else {
        s.max() / smin
    }
}
