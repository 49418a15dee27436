//! Multiplier fitting: `H = argmin_Φ Ĵ_Φ(η)` (offset `h = 0`) over the `Φ`
//! for which `η ∈ Θ(Φ)`, plus the bare stability-certificate feasibility SDP.

use lgss_sdp::{solve, ConicProgram, SolveOptions, SolveStatus};
use nalgebra::{DMatrix, DVector};

use super::barrier::{minimize, BarrierOptions, LmiTerm, SmoothValue};
use super::bound::{jhat_with_derivatives, Order};
use super::dense::{affine_coefficients, epigraph_matrix, stability_lmi};
use super::{h_directions, Multiplier, SimErrorInstance};
use crate::linalg::{discrete_lyapunov, inv_pd, min_eig, smat, spectral_radius, svec, svec_len, sym, sym_unit};
use crate::model::ImplicitModel;
use crate::{Exec, LgssError, Result};

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Strictness margin of `M ≻ 0`, relative to `‖M‖` at the start point.
    pub margin_rel: f64,
    pub rel_tol: f64,
    /// Slack kept in `M` at the returned pair, as a fraction of the start point's
    /// (both Jacobi-scaled).
    pub slack_rel: f64,
    pub exec: Exec,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { margin_rel: 1e-9, rel_tol: 1e-9, slack_rel: 1e-4, exec: Exec::default() }
    }
}

#[derive(Debug, Clone)]
pub struct MultiplierFit {
    pub h_mat: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// `Ĵ` at the fitted `H` with `h = 0`.
    pub jhat: f64,
    pub newton_steps: usize,
}

/// Relative ridge added to `C'Σv⁻¹C` in [`lyapunov_start`].
pub const LYAPUNOV_REG: f64 = 1e-3;

/// `H = E⁻ᵀP` with `P - A'PA = C'Σv⁻¹C + δI`, `δ = LYAPUNOV_REG·‖C'Σv⁻¹C‖`;
/// gives `M ≻ 0` whenever `ρ(E⁻¹F) < 1`.
pub fn lyapunov_start(eta: &ImplicitModel) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let a = eta
        .e
        .clone()
        .lu()
        .solve(&eta.f)
        .ok_or_else(|| LgssError::NotCertifiable("E is singular".into()))?;
    let rho = spectral_radius(&a);
    if !(rho < 1.0) {
        return Err(LgssError::NotCertifiable(format!("spectral radius {rho:.6} is not below one")));
    }
    let n = a.nrows();
    let cc = eta.c.transpose() * inv_pd(&eta.sigma_v, "Sigma_v")? * &eta.c;
    let delta = LYAPUNOV_REG * cc.norm().max(f64::MIN_POSITIVE.sqrt());
    let q = &cc + DMatrix::identity(n, n) * delta;
    let p = discrete_lyapunov(&a, &q)?;
    let h = eta
        .e
        .transpose()
        .lu()
        .solve(&p)
        .ok_or_else(|| LgssError::NotCertifiable("E is singular".into()))?;
    Ok((h, p))
}

/// Margin `μ` for `M ⪰ μI`, never more than half the start point's slack.
pub(crate) fn lmi_margin(m0: &DMatrix<f64>, rel: f64) -> f64 {
    (rel * m0.norm().max(1.0)).min(0.5 * min_eig(m0))
}

/// `M(η, Φ, P) - μI` as an LMI in `(vec Φ, svec P)`.
pub(crate) fn stability_term_in_h(eta: &ImplicitModel, margin: f64) -> LmiTerm {
    let n = eta.e.nrows();
    let np = svec_len(n);
    let f = |z: &DVector<f64>| {
        let h = DMatrix::from_column_slice(n, n, &z.as_slice()[..n * n]);
        stability_lmi(eta, &h, &smat(&z.as_slice()[n * n..], n))
    };
    let (mut c0, coeffs) = affine_coefficients(f, n * n + np);
    let dim = c0.nrows();
    c0 -= DMatrix::identity(dim, dim) * margin;
    let shared = coeffs[..n * n].iter().cloned().enumerate().collect();
    let private = coeffs[n * n..].to_vec();
    LmiTerm { constant: c0, shared, private }
}

pub fn fit_multiplier(eta: &ImplicitModel, inst: &SimErrorInstance, opts: &FitOptions) -> Result<MultiplierFit> {
    let n = eta.e.nrows();
    let t = inst.horizon();
    let (h0, p0) = lyapunov_start(eta)?;
    let margin = lmi_margin(&stability_lmi(eta, &h0, &p0), opts.margin_rel);
    let term = stability_term_in_h(eta, margin);
    let dirs = h_directions(n);
    let objective = |v: &DVector<f64>, order: Order| -> Option<SmoothValue> {
        let mult = Multiplier::linear(DMatrix::from_column_slice(n, n, v.as_slice()), t);
        let ev = jhat_with_derivatives(eta, &mult, inst, &dirs, order).ok()?;
        Some(SmoothValue {
            value: ev.value,
            grad: ev.grad,
            hess: ev.hess.unwrap_or_else(|| DMatrix::zeros(0, 0)),
        })
    };
    let bopts = BarrierOptions { rel_tol: opts.rel_tol, exec: Exec::Sequential, ..Default::default() };
    let v0 = DVector::from_column_slice(h0.as_slice());
    let res = minimize(&objective, &[term], v0, vec![svec(&p0)], &bopts)?;
    let mut h = DMatrix::from_column_slice(n, n, res.v.as_slice());
    let mut p = smat(res.p[0].as_slice(), n);
    // The optimum typically sits on the boundary of Θ(Φ). Mix in some of the
    // start point so the M-step begins with usable slack; M is jointly affine in
    // (Φ, P), so the mixture stays feasible, and Ĵ is convex in Φ. Slack is
    // measured after Jacobi scaling by the start point's diagonal, where the
    // smallest eigenvalue is concave along the mixing segment.
    let m0 = stability_lmi(eta, &h0, &p0);
    let d = m0.diagonal().map(|x| 1.0 / x.sqrt());
    let scaled_slack = |m: &DMatrix<f64>| min_eig(&DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * d[i] * d[j]));
    let (l0, l1) = (scaled_slack(&m0), scaled_slack(&stability_lmi(eta, &h, &p)));
    let target = opts.slack_rel * l0;
    let mut jhat = res.value;
    if l1 < target {
        let beta = ((target - l1) / (l0 - l1)).clamp(0.0, 1.0);
        h = &h * (1.0 - beta) + &h0 * beta;
        p = &p * (1.0 - beta) + &p0 * beta;
        jhat = jhat_with_derivatives(eta, &Multiplier::linear(h.clone(), t), inst, &[], Order::Value)?.value;
    }
    Ok(MultiplierFit { h_mat: h, p, jhat, newton_steps: res.newton_steps })
}

/// Independent fits, one per instance, in input order.
pub fn fit_multipliers(eta: &ImplicitModel, insts: &[SimErrorInstance], opts: &FitOptions) -> Result<Vec<MultiplierFit>> {
    opts.exec.map(insts, |_, inst| fit_multiplier(eta, inst, opts)).into_iter().collect()
}

/// The same fit posed literally as a conic program over `(vec Φ, svec P, s)`:
/// minimise `s` subject to the epigraph LMI and `M(η, Φ, P) ⪰ μI`.
pub fn fit_multiplier_conic(
    eta: &ImplicitModel,
    inst: &SimErrorInstance,
    margin: f64,
    sdp: &SolveOptions,
) -> Result<(MultiplierFit, SolveStatus)> {
    let n = eta.e.nrows();
    let t = inst.horizon();
    let np = svec_len(n);
    let nv = n * n + np + 1;
    let mut prog = ConicProgram::new(nv);
    prog.objective[nv - 1] = 1.0;
    let epi = |z: &DVector<f64>| {
        let mult = Multiplier::linear(DMatrix::from_column_slice(n, n, &z.as_slice()[..n * n]), t);
        epigraph_matrix(eta, z[nv - 1], &mult, inst)
    };
    let (c0, coeffs) = affine_coefficients(epi, nv);
    prog.add_dense_block(&c0, &coeffs.into_iter().enumerate().collect::<Vec<_>>());
    let term = stability_term_in_h(eta, margin);
    let mut coeffs: Vec<(usize, DMatrix<f64>)> = term.shared;
    coeffs.extend(term.private.into_iter().enumerate().map(|(k, b)| (n * n + k, b)));
    prog.add_dense_block(&term.constant, &coeffs);
    let res = solve(&prog, sdp)?;
    match res.status {
        SolveStatus::Infeasible => Err(LgssError::NotCertifiable("multiplier fit is infeasible".into())),
        s if s.is_solved() => Ok((
            MultiplierFit {
                h_mat: DMatrix::from_column_slice(n, n, &res.y.as_slice()[..n * n]),
                p: smat(&res.y.as_slice()[n * n..n * n + np], n),
                jhat: res.y[nv - 1],
                newton_steps: res.iterations,
            },
            s,
        )),
        s => Err(LgssError::Solver(format!("multiplier fit: {} ({})", s.as_str(), res.message))),
    }
}

/// Outcome of the certificate search `max τ s.t. M(η, H, P) ⪰ τI`.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub feasible: bool,
    pub tau: f64,
    pub status: SolveStatus,
    pub h_mat: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

/// Bound on `‖H‖` and `P` keeping the certificate search bounded.
pub const CERTIFICATE_BOUND: f64 = 1e4;
/// `τ*` above this counts as a strict certificate.
pub const CERTIFICATE_THRESHOLD: f64 = 1e-6;

/// Variables `(vec H, svec P, τ)`: maximise `τ` subject to `M ⪰ τI`,
/// `[[κI, H], [H', κI]] ⪰ 0`, `P ⪯ κI` and `τ ≤ 1`.
pub fn certificate_program(eta: &ImplicitModel) -> ConicProgram {
    let n = eta.e.nrows();
    let np = svec_len(n);
    let nv = n * n + np + 1;
    let tau = nv - 1;
    let mut prog = ConicProgram::new(nv);
    prog.objective[tau] = -1.0;
    let term = stability_term_in_h(eta, 0.0);
    let dim = term.constant.nrows();
    let mut coeffs: Vec<(usize, DMatrix<f64>)> = term.shared;
    coeffs.extend(term.private.into_iter().enumerate().map(|(k, b)| (n * n + k, b)));
    coeffs.push((tau, -DMatrix::identity(dim, dim)));
    prog.add_dense_block(&term.constant, &coeffs);

    let k = CERTIFICATE_BOUND;
    let norm_c0 = DMatrix::identity(2 * n, 2 * n) * k;
    let norm_coeffs: Vec<(usize, DMatrix<f64>)> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx % n, idx / n);
            let mut m = DMatrix::zeros(2 * n, 2 * n);
            m[(i, n + j)] = 1.0;
            m[(n + j, i)] = 1.0;
            (idx, m)
        })
        .collect();
    prog.add_dense_block(&norm_c0, &norm_coeffs);

    let p_coeffs: Vec<(usize, DMatrix<f64>)> = crate::linalg::svec_pairs(n)
        .into_iter()
        .enumerate()
        .map(|(s, (i, j))| (n * n + s, -sym_unit(n, i, j)))
        .collect();
    prog.add_dense_block(&(DMatrix::identity(n, n) * k), &p_coeffs);

    let cap = prog.add_block(1);
    prog.add_constant(cap, 0, 0, 1.0);
    prog.add_coeff(cap, tau, 0, 0, -1.0);
    prog
}

/// Solves [`certificate_program`]; `feasible` iff `τ* > CERTIFICATE_THRESHOLD`.
pub fn stability_certificate(eta: &ImplicitModel, sdp: &SolveOptions) -> Result<Certificate> {
    let n = eta.e.nrows();
    let np = svec_len(n);
    let prog = certificate_program(eta);
    let res = solve(&prog, sdp)?;
    let tau = res.y[n * n + np];
    let feasible = res.status.is_solved() && tau > CERTIFICATE_THRESHOLD;
    if !res.status.is_solved() && res.status != SolveStatus::Infeasible {
        return Err(LgssError::Solver(format!("certificate search: {} ({})", res.status.as_str(), res.message)));
    }
    Ok(Certificate {
        feasible,
        tau,
        status: res.status,
        h_mat: DMatrix::from_column_slice(n, n, &res.y.as_slice()[..n * n]),
        p: sym(&smat(&res.y.as_slice()[n * n..n * n + np], n)),
    })
}
