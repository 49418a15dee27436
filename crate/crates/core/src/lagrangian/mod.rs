//! Lagrangian relaxation of the simulation-error objective and the constrained
//! M-step built on it.
//!
//! For an implicit model `η = (E, F, K, L, C, D, Σv)` and one data instance the
//! simulation error `ℰ = Σ_t |y_t - C x_t - D u_t|²_{Σv⁻¹}` (states obeying the
//! implicit dynamics) is bounded above by
//!
//! ```text
//! Ĵ(η) = sup_x  Σ_t |r_t - C x_t|²_{Σv⁻¹} - 2 Σ_t (H x_t + h_t)'ℱ_t(x)
//! ```
//!
//! where `ℱ_t` are the dynamics residuals and `(H, h)` a fixed multiplier. `Ĵ`
//! is convex in `η`, finite whenever the LMI `M(η, H, P) ≻ 0` holds, and equal
//! to `ℰ` at the model the multiplier was fitted at.

mod barrier;
pub mod bound;
pub mod dense;
mod fit;
mod mstep;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{smat, svec, svec_len, svec_pairs};
use crate::model::{Dimensions, ImplicitModel};

pub use bound::{
    compute_h, jhat_closed_form, jhat_with_derivatives, simulate_implicit, simulation_error, BoundEval, Order,
    TridiagFactor,
};
pub use fit::{
    certificate_program, fit_multiplier, fit_multiplier_conic, fit_multipliers, lyapunov_start, stability_certificate,
    Certificate, FitOptions, MultiplierFit, CERTIFICATE_BOUND, CERTIFICATE_THRESHOLD,
};
pub use mstep::{fit_tight_multipliers, mstep_program, q3_lower_bound, qhat, solve_mstep, MStepOptions, MStepResult, MStepRoute};

/// One simulation-error term: signals driving the implicit model from `x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimErrorInstance {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub x1: DVector<f64>,
    /// `nw x T`; the last column never enters the states.
    pub w: DMatrix<f64>,
}

impl SimErrorInstance {
    pub fn horizon(&self) -> usize {
        self.y.ncols()
    }

    /// Zero input and output, driven only by `(x1, w)`.
    pub fn homogeneous(nu: usize, ny: usize, x1: DVector<f64>, w: DMatrix<f64>) -> Self {
        let t = w.ncols();
        Self { u: DMatrix::zeros(nu, t), y: DMatrix::zeros(ny, t), x1, w }
    }
}

/// Multiplier `λ_t = H x_t + h_t`; `h` is `nx x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Multiplier {
    pub h_mat: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl Multiplier {
    pub fn linear(h_mat: DMatrix<f64>, t: usize) -> Self {
        let nx = h_mat.nrows();
        Self { h_mat, h: DMatrix::zeros(nx, t) }
    }
}

/// Which scalar entry of the parameters a direction perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    E,
    F,
    K,
    L,
    C,
    D,
    /// Symmetric unit `e_i e_j' + e_j e_i'` (or `e_i e_i'`).
    SigmaV,
    H,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Direction {
    pub param: Param,
    pub i: usize,
    pub j: usize,
}

/// Vectorisation of `(E, F, K, L, C, D, svec Σv)`, each block column-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EtaLayout {
    pub dims: Dimensions,
}

impl EtaLayout {
    pub fn new(dims: Dimensions) -> Self {
        Self { dims }
    }

    fn blocks(&self) -> [(Param, usize, usize); 6] {
        let d = self.dims;
        [
            (Param::E, d.nx, d.nx),
            (Param::F, d.nx, d.nx),
            (Param::K, d.nx, d.nu),
            (Param::L, d.nx, d.nw),
            (Param::C, d.ny, d.nx),
            (Param::D, d.ny, d.nu),
        ]
    }

    pub fn directions(&self) -> Vec<Direction> {
        let mut out = Vec::with_capacity(self.len());
        for (param, r, c) in self.blocks() {
            for j in 0..c {
                for i in 0..r {
                    out.push(Direction { param, i, j });
                }
            }
        }
        for (i, j) in svec_pairs(self.dims.ny) {
            out.push(Direction { param: Param::SigmaV, i, j });
        }
        out
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.1 * b.2).sum::<usize>() + svec_len(self.dims.ny)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, eta: &ImplicitModel) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.len());
        for m in [&eta.e, &eta.f, &eta.k, &eta.l, &eta.c, &eta.d] {
            v.extend_from_slice(m.as_slice());
        }
        v.extend(svec(&eta.sigma_v).iter());
        DVector::from_vec(v)
    }

    pub fn unpack(&self, v: &DVector<f64>, p: &DMatrix<f64>) -> ImplicitModel {
        let mut off = 0;
        let mut take = |r: usize, c: usize| {
            let m = DMatrix::from_column_slice(r, c, &v.as_slice()[off..off + r * c]);
            off += r * c;
            m
        };
        let d = self.dims;
        let e = take(d.nx, d.nx);
        let f = take(d.nx, d.nx);
        let k = take(d.nx, d.nu);
        let l = take(d.nx, d.nw);
        let c = take(d.ny, d.nx);
        let dd = take(d.ny, d.nu);
        let sigma_v = smat(&v.as_slice()[off..], d.ny);
        ImplicitModel { e, f, k, l, c, d: dd, sigma_v, p: p.clone() }
    }
}

/// Column-major directions for the entries of `H`.
pub fn h_directions(nx: usize) -> Vec<Direction> {
    let mut out = Vec::with_capacity(nx * nx);
    for j in 0..nx {
        for i in 0..nx {
            out.push(Direction { param: Param::H, i, j });
        }
    }
    out
}
