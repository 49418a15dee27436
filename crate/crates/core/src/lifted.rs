//! Stacked ("lifted") maps over a whole record: `X = F̄ Z + Ḡ U`, `Y = C̄ X + D̄ U + V`,
//! with `Z = [x_1; w_1; ...; w_{T-1}]`.

use nalgebra::DMatrix;

use crate::model::SystemMatrices;

pub fn matrix_powers(a: &DMatrix<f64>, n: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(DMatrix::identity(a.nrows(), a.nrows()));
    for k in 0..n {
        let next = a * &out[k];
        out.push(next);
    }
    out
}

/// Block-diagonal `I_t ⊗ m`.
pub fn repeat_diag(m: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    DMatrix::identity(t, t).kronecker(m)
}

/// Rows `[A^{t-1}, A^{t-2} G, ..., G, 0, ...]` for `t = 1..T`.
pub fn state_map(a: &DMatrix<f64>, g: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let (nx, nw) = (a.nrows(), g.ncols());
    let pw = matrix_powers(a, t);
    let pg: Vec<DMatrix<f64>> = pw.iter().map(|p| p * g).collect();
    let mut f = DMatrix::zeros(t * nx, nx + t.saturating_sub(1) * nw);
    for k in 0..t {
        f.view_mut((k * nx, 0), (nx, nx)).copy_from(&pw[k]);
        for i in 0..k {
            f.view_mut((k * nx, nx + i * nw), (nx, nw)).copy_from(&pg[k - 1 - i]);
        }
    }
    f
}

/// Input-to-state map; the last input column never reaches a state.
pub fn input_map(a: &DMatrix<f64>, b: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let (nx, nu) = (a.nrows(), b.ncols());
    let pb: Vec<DMatrix<f64>> = matrix_powers(a, t).iter().map(|p| p * b).collect();
    let mut g = DMatrix::zeros(t * nx, t * nu);
    for k in 0..t {
        for i in 0..k {
            g.view_mut((k * nx, i * nu), (nx, nu)).copy_from(&pb[k - 1 - i]);
        }
    }
    g
}

#[derive(Debug, Clone)]
pub struct LiftedExplicit {
    pub f_bar: DMatrix<f64>,
    pub g_bar: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub d_bar: DMatrix<f64>,
    pub sigma_bar: DMatrix<f64>,
}

pub fn lift_explicit(s: &SystemMatrices, t: usize) -> LiftedExplicit {
    LiftedExplicit {
        f_bar: state_map(&s.a, &s.g, t),
        g_bar: input_map(&s.a, &s.b, t),
        c_bar: repeat_diag(&s.c, t),
        d_bar: repeat_diag(&s.d, t),
        sigma_bar: repeat_diag(&s.sigma_v, t),
    }
}

/// Column-stack of a `n x T` signal.
pub fn stack(m: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_column_slice(m.as_slice())
}
