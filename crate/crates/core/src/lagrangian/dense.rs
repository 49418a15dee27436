//! Dense lifted forms: the implicit dynamics constraint `F̄ᵢ x + ε = 0`, the
//! stability LMI, the epigraph LMI and a dense evaluation of `Ĵ`.

use nalgebra::{DMatrix, DVector};

use super::{Multiplier, SimErrorInstance};
use crate::lifted::repeat_diag;
use crate::linalg::inv_pd;
use crate::model::ImplicitModel;
use crate::{LgssError, Result};

/// `F̄ᵢ` (block bidiagonal: `E` on the diagonal, `-F` below) and `ε` with
/// blocks `[-E x̃1; -(K u_1 + L w_1); ...]`.
pub fn lift_implicit(eta: &ImplicitModel, inst: &SimErrorInstance) -> (DMatrix<f64>, DVector<f64>) {
    let n = eta.e.nrows();
    let t = inst.horizon();
    let mut fi = DMatrix::zeros(n * t, n * t);
    let mut eps = DVector::zeros(n * t);
    for k in 0..t {
        fi.view_mut((k * n, k * n), (n, n)).copy_from(&eta.e);
        if k > 0 {
            fi.view_mut((k * n, (k - 1) * n), (n, n)).copy_from(&(-&eta.f));
            let b = -(&eta.k * inst.u.column(k - 1) + &eta.l * inst.w.column(k - 1));
            eps.rows_mut(k * n, n).copy_from(&b);
        } else {
            eps.rows_mut(0, n).copy_from(&(-(&eta.e * &inst.x1)));
        }
    }
    (fi, eps)
}

/// `Y - D̄U` stacked.
pub fn output_offset(eta: &ImplicitModel, inst: &SimErrorInstance) -> DVector<f64> {
    let r = &inst.y - &eta.d * &inst.u;
    DVector::from_column_slice(r.as_slice())
}

/// `M(η, H, P) = [[H'E + E'H - P, F'H, C'], [H'F, P, 0], [C, 0, Σv]]`.
pub fn stability_lmi(eta: &ImplicitModel, h_mat: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let n = eta.e.nrows();
    let ny = eta.c.nrows();
    let he = h_mat.transpose() * &eta.e;
    let hf = h_mat.transpose() * &eta.f;
    let mut m = DMatrix::zeros(2 * n + ny, 2 * n + ny);
    m.view_mut((0, 0), (n, n)).copy_from(&(&he + he.transpose() - p));
    m.view_mut((0, n), (n, n)).copy_from(&hf.transpose());
    m.view_mut((n, 0), (n, n)).copy_from(&hf);
    m.view_mut((n, n), (n, n)).copy_from(p);
    m.view_mut((0, 2 * n), (n, ny)).copy_from(&eta.c.transpose());
    m.view_mut((2 * n, 0), (ny, n)).copy_from(&eta.c);
    m.view_mut((2 * n, 2 * n), (ny, ny)).copy_from(&eta.sigma_v);
    m
}

/// `Λ'F̄ᵢ + F̄ᵢ'Λ - C̄'Σ̄⁻¹C̄`; the supremum defining `Ĵ` is finite iff this is PD.
pub fn curvature_matrix(eta: &ImplicitModel, h_mat: &DMatrix<f64>, t: usize) -> Result<DMatrix<f64>> {
    let inst = SimErrorInstance::homogeneous(eta.k.ncols(), eta.c.nrows(), DVector::zeros(eta.e.nrows()), DMatrix::zeros(eta.l.ncols(), t));
    let (fi, _) = lift_implicit(eta, &inst);
    let lam = repeat_diag(h_mat, t);
    let cbar = repeat_diag(&eta.c, t);
    let rbar = repeat_diag(&inv_pd(&eta.sigma_v, "Sigma_v")?, t);
    let lf = lam.transpose() * &fi;
    Ok(&lf + lf.transpose() - cbar.transpose() * rbar * cbar)
}

/// Epigraph matrix
/// `N(η, s) = [[s + 2h'ε, h'F̄ᵢ + ε'Λ, (Y - D̄U)'], [·, Λ'F̄ᵢ + F̄ᵢ'Λ, -C̄'], [·, ·, Σ̄]]`,
/// affine in `(η, s)`; `N ⪰ 0` iff `s ≥ Ĵ(η)`.
pub fn epigraph_matrix(eta: &ImplicitModel, s: f64, mult: &Multiplier, inst: &SimErrorInstance) -> DMatrix<f64> {
    let n = eta.e.nrows();
    let ny = eta.c.nrows();
    let t = inst.horizon();
    let (fi, eps) = lift_implicit(eta, inst);
    let lam = repeat_diag(&mult.h_mat, t);
    let h = DVector::from_column_slice(mult.h.as_slice());
    let r = output_offset(eta, inst);
    let (a, b) = (n * t, ny * t);
    let mut m = DMatrix::zeros(1 + a + b, 1 + a + b);
    m[(0, 0)] = s + 2.0 * h.dot(&eps);
    let row = fi.transpose() * &h + lam.transpose() * &eps;
    m.view_mut((0, 1), (1, a)).copy_from(&row.transpose());
    m.view_mut((1, 0), (a, 1)).copy_from(&row);
    m.view_mut((0, 1 + a), (1, b)).copy_from(&r.transpose());
    m.view_mut((1 + a, 0), (b, 1)).copy_from(&r);
    let lf = lam.transpose() * &fi;
    m.view_mut((1, 1), (a, a)).copy_from(&(&lf + lf.transpose()));
    let cbar = repeat_diag(&eta.c, t);
    m.view_mut((1, 1 + a), (a, b)).copy_from(&(-cbar.transpose()));
    m.view_mut((1 + a, 1), (b, a)).copy_from(&(-cbar));
    m.view_mut((1 + a, 1 + a), (b, b)).copy_from(&repeat_diag(&eta.sigma_v, t));
    m
}

/// Dense `Ĵ = c + b'(-Ψ)⁻¹b` with the supremum solved by LU.
pub fn jhat_dense(eta: &ImplicitModel, mult: &Multiplier, inst: &SimErrorInstance) -> Result<f64> {
    let t = inst.horizon();
    let (fi, eps) = lift_implicit(eta, inst);
    let lam = repeat_diag(&mult.h_mat, t);
    let cbar = repeat_diag(&eta.c, t);
    let rbar = repeat_diag(&inv_pd(&eta.sigma_v, "Sigma_v")?, t);
    let h = DVector::from_column_slice(mult.h.as_slice());
    let r = output_offset(eta, inst);
    let lf = lam.transpose() * &fi;
    let nmat = &lf + lf.transpose() - cbar.transpose() * &rbar * &cbar;
    let chol = nmat
        .cholesky()
        .ok_or_else(|| LgssError::Unbounded("curvature matrix is not positive definite".into()))?;
    let q = cbar.transpose() * &rbar * &r + lam.transpose() * &eps + fi.transpose() * &h;
    let c = (r.transpose() * &rbar * &r)[(0, 0)] - 2.0 * h.dot(&eps);
    Ok(c + q.dot(&chol.solve(&q)))
}

/// `Ψ = C̄'Σ̄⁻¹C̄ - Λ'F̄ᵢ - F̄ᵢ'Λ` and `h = F̄ᵢ'⁻¹(Ψ X* - C̄'Σ̄⁻¹(Y - D̄U) - Λ'ε)`.
pub fn compute_h_dense(eta: &ImplicitModel, h_mat: &DMatrix<f64>, inst: &SimErrorInstance) -> Result<DMatrix<f64>> {
    let t = inst.horizon();
    let n = eta.e.nrows();
    let (fi, eps) = lift_implicit(eta, inst);
    let lam = repeat_diag(h_mat, t);
    let cbar = repeat_diag(&eta.c, t);
    let rbar = repeat_diag(&inv_pd(&eta.sigma_v, "Sigma_v")?, t);
    let lf = lam.transpose() * &fi;
    let psi = cbar.transpose() * &rbar * &cbar - &lf - lf.transpose();
    let xs = fi
        .clone()
        .lu()
        .solve(&(-&eps))
        .ok_or_else(|| LgssError::CertificateViolation("singular implicit dynamics".into()))?;
    let rhs = psi * xs - cbar.transpose() * rbar * output_offset(eta, inst) - lam.transpose() * eps;
    let h = fi
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| LgssError::CertificateViolation("singular implicit dynamics".into()))?;
    Ok(DMatrix::from_column_slice(n, t, h.as_slice()))
}

/// Coefficients of an affine matrix map: `f(v) = f(0) + Σ_i v_i (f(e_i) - f(0))`.
pub fn affine_coefficients(
    f: impl Fn(&DVector<f64>) -> DMatrix<f64>,
    n_vars: usize,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let zero = DVector::zeros(n_vars);
    let c0 = f(&zero);
    let coeffs = (0..n_vars)
        .map(|i| {
            let mut e = zero.clone();
            e[i] = 1.0;
            f(&e) - &c0
        })
        .collect();
    (c0, coeffs)
}
