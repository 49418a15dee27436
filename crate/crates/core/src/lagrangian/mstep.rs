//! The constrained M-step for the implicit parameters:
//!
//! ```text
//! min_η  Σ_j Ĵ_j(η) + T tr(Σv_k⁻¹ Σv)   s.t.  M(η, H_j, P_j) ≻ 0 ∀j,  Σv ⪰ σ_min I
//! ```
//!
//! Two routes solve the same problem: a structured barrier method that keeps
//! each `Ĵ_j` in closed form (production), and the literal conic program with
//! one epigraph LMI per instance (small horizons, cross-checking).

use std::f64::consts::PI;

use lgss_sdp::{solve, ConicProgram, SolveOptions};
use nalgebra::{DMatrix, DVector};

use super::barrier::{minimize, BarrierOptions, LmiTerm, SmoothValue};
use super::bound::{check_instance, compute_h, evaluate, jhat_closed_form, Order, Prepared, TridiagFactor};
use super::dense::{affine_coefficients, epigraph_matrix, stability_lmi};
use super::fit::{fit_multiplier, lmi_margin, lyapunov_start, FitOptions, MultiplierFit};
use super::{EtaLayout, Multiplier, Param, SimErrorInstance};
use crate::linalg::{inv_pd, logdet_pd, smat, svec, svec_len, svec_pairs, sym_unit};
use crate::model::ImplicitModel;
use crate::{Exec, LgssError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MStepRoute {
    #[default]
    Structured,
    Conic,
}

#[derive(Debug, Clone)]
pub struct MStepOptions {
    pub route: MStepRoute,
    /// Fit one multiplier on instance 0 and reuse it for every instance.
    pub shared_h: bool,
    pub sigma_min: f64,
    pub margin_rel: f64,
    pub rel_tol: f64,
    /// Looser tolerance for the multiplier fits: their central-path points
    /// keep slack in `M(η_k, H_j, P_j)`, which the M-step starts from.
    pub fit_rel_tol: f64,
    /// `>= 1` skips the per-instance fits and uses the Lyapunov multiplier
    /// [`lyapunov_start`] for every instance; smaller values fit `H_j` by
    /// minimising `Ĵ` and keep this fraction of the starting slack.
    pub slack_rel: f64,
    pub exec: Exec,
    pub sdp: SolveOptions,
}

impl Default for MStepOptions {
    fn default() -> Self {
        Self {
            route: MStepRoute::Structured,
            shared_h: false,
            sigma_min: 1e-8,
            margin_rel: 1e-9,
            rel_tol: 1e-9,
            fit_rel_tol: 1e-6,
            slack_rel: 1.0,
            exec: Exec::default(),
            sdp: SolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MStepResult {
    pub eta: ImplicitModel,
    /// Tight multipliers `(H_j, h_j)` fitted at the incoming model.
    pub multipliers: Vec<Multiplier>,
    /// `P_j` certifying `η ∈ Θ(H_j)` at the new model.
    pub certificates: Vec<DMatrix<f64>>,
    /// `Q̂` at the incoming and outgoing models.
    pub qhat_before: f64,
    pub qhat_after: f64,
    pub status: String,
}

/// `Q̂(η) = Σ_j Ĵ_j(η) + T tr(Σv_k⁻¹Σv) + T logdet Σv_k - T n_y`, an upper bound
/// on `Σ_j ℰ_j(η) + T logdet Σv` that is tight at `Σv = Σv_k`.
pub fn qhat(eta: &ImplicitModel, mults: &[Multiplier], insts: &[SimErrorInstance], sigma_v_k: &DMatrix<f64>) -> Result<f64> {
    let t = insts.first().map(|i| i.horizon()).unwrap_or(0) as f64;
    let ny = sigma_v_k.nrows() as f64;
    let rk = inv_pd(sigma_v_k, "Sigma_v")?;
    let mut s = t * ((&rk * &eta.sigma_v).trace() + logdet_pd(sigma_v_k, "Sigma_v")? - ny);
    for (m, inst) in mults.iter().zip(insts) {
        s += jhat_closed_form(eta, m, inst)?;
    }
    Ok(s)
}

/// Everything but the constant `T n_y log 2π`, halved: `-Q̂/2` bounds the
/// output term of the EM auxiliary function from below.
pub fn q3_lower_bound(qhat: f64, t: usize, ny: usize) -> f64 {
    -0.5 * (qhat + (t * ny) as f64 * (2.0 * PI).ln())
}

/// Multipliers `(H_j, h_j)` fitted at `η`, tight there, with their certificates `P_j`.
pub fn fit_tight_multipliers(
    eta: &ImplicitModel,
    insts: &[SimErrorInstance],
    opts: &MStepOptions,
) -> Result<(Vec<Multiplier>, Vec<DMatrix<f64>>)> {
    let fopts = FitOptions { margin_rel: opts.margin_rel, rel_tol: opts.fit_rel_tol, slack_rel: opts.slack_rel, exec: Exec::Sequential };
    let fits: Vec<MultiplierFit> = if opts.slack_rel >= 1.0 {
        let (h_mat, p) = lyapunov_start(eta)?;
        vec![MultiplierFit { h_mat, p, jhat: f64::NAN, newton_steps: 0 }; insts.len()]
    } else if opts.shared_h {
        let f0 = fit_multiplier(eta, &insts[0], &fopts)?;
        vec![f0; insts.len()]
    } else {
        opts.exec.map(insts, |_, inst| fit_multiplier(eta, inst, &fopts)).into_iter().collect::<Result<_>>()?
    };
    let mults = opts
        .exec
        .map(insts, |j, inst| -> Result<Multiplier> {
            let h = compute_h(eta, &fits[j].h_mat, inst)?;
            Ok(Multiplier { h_mat: fits[j].h_mat.clone(), h })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((mults, fits.into_iter().map(|f| f.p).collect()))
}

/// `M(η, H, P) - μI` as an LMI in `(η, svec P)`; zero coefficients dropped.
fn stability_term_in_eta(layout: &EtaLayout, h_mat: &DMatrix<f64>, p_template: &DMatrix<f64>, margin: f64) -> LmiTerm {
    let nv = layout.len();
    let n = layout.dims.nx;
    let np = svec_len(n);
    let f = |z: &DVector<f64>| {
        let eta = layout.unpack(&z.rows(0, nv).into_owned(), p_template);
        stability_lmi(&eta, h_mat, &smat(&z.as_slice()[nv..], n))
    };
    let (mut c0, coeffs) = affine_coefficients(f, nv + np);
    let dim = c0.nrows();
    c0 -= DMatrix::identity(dim, dim) * margin;
    let shared = coeffs[..nv].iter().cloned().enumerate().filter(|(_, m)| m.iter().any(|x| *x != 0.0)).collect();
    LmiTerm { constant: c0, shared, private: coeffs[nv..].to_vec() }
}

fn sigma_term(layout: &EtaLayout, sigma_min: f64) -> LmiTerm {
    let ny = layout.dims.ny;
    let off = layout.len() - svec_len(ny);
    let shared = svec_pairs(ny).into_iter().enumerate().map(|(k, (i, j))| (off + k, sym_unit(ny, i, j))).collect();
    LmiTerm { constant: -DMatrix::identity(ny, ny) * sigma_min, shared, private: Vec::new() }
}

/// One M-step from `η_k` (its `Σv` is the linearisation point of the log-det).
pub fn solve_mstep(eta_k: &ImplicitModel, insts: &[SimErrorInstance], opts: &MStepOptions) -> Result<MStepResult> {
    if insts.is_empty() {
        return Err(LgssError::InvalidModel("M-step needs at least one instance".into()));
    }
    let layout = EtaLayout::new(eta_k.dims());
    for inst in insts {
        check_instance(eta_k, &Multiplier::linear(eta_k.p.clone(), inst.horizon()), inst)?;
    }
    let (mults, p0s) = fit_tight_multipliers(eta_k, insts, opts)?;
    let qhat_before = qhat(eta_k, &mults, insts, &eta_k.sigma_v)?;
    let margins: Vec<f64> = mults
        .iter()
        .zip(&p0s)
        .map(|(m, p)| lmi_margin(&stability_lmi(eta_k, &m.h_mat, p), opts.margin_rel))
        .collect();
    let (eta, certs, status) = match opts.route {
        MStepRoute::Structured => structured(eta_k, &layout, insts, &mults, &p0s, &margins, opts)?,
        MStepRoute::Conic => conic(eta_k, &layout, insts, &mults, &margins, opts)?,
    };
    let qhat_after = qhat(&eta, &mults, insts, &eta_k.sigma_v)?;
    Ok(MStepResult { eta, multipliers: mults, certificates: certs, qhat_before, qhat_after, status })
}

type Solved = (ImplicitModel, Vec<DMatrix<f64>>, String);

fn structured(
    eta_k: &ImplicitModel,
    layout: &EtaLayout,
    insts: &[SimErrorInstance],
    mults: &[Multiplier],
    p0s: &[DMatrix<f64>],
    margins: &[f64],
    opts: &MStepOptions,
) -> Result<Solved> {
    let nv = layout.len();
    let n = layout.dims.nx;
    let t = insts[0].horizon() as f64;
    let dirs = layout.directions();
    let rk = inv_pd(&eta_k.sigma_v, "Sigma_v")?;
    // Linear term T tr(Σv_k⁻¹ Σv).
    let mut lin = DVector::zeros(nv);
    for (q, d) in dirs.iter().enumerate() {
        if d.param == Param::SigmaV {
            lin[q] = t * if d.i == d.j { rk[(d.i, d.i)] } else { 2.0 * rk[(d.i, d.j)] };
        }
    }
    // Instances with the same (H, P) share the factorisation of N and one
    // stability constraint (the LMI does not depend on the offsets h_j).
    let mut group = Vec::with_capacity(mults.len());
    let mut reps: Vec<usize> = Vec::new();
    for (j, m) in mults.iter().enumerate() {
        match reps.iter().position(|&r| mults[r].h_mat == m.h_mat && p0s[r] == p0s[j]) {
            Some(g) => group.push(g),
            None => {
                group.push(reps.len());
                reps.push(j);
            }
        }
    }
    let p_tmpl = &eta_k.p;
    let objective = |v: &DVector<f64>, order: Order| -> Option<SmoothValue> {
        let eta = layout.unpack(v, p_tmpl);
        let factors = opts.exec.map(&reps, |_, &r| {
            let pre = Prepared::new(&eta, &mults[r].h_mat).ok()?;
            let factor = TridiagFactor::new(&eta, &mults[r].h_mat, &pre.r_dense, insts[r].horizon()).ok()?;
            Some((pre, factor))
        });
        let factors: Vec<(Prepared, TridiagFactor)> = factors.into_iter().collect::<Option<_>>()?;
        let parts = opts.exec.map(insts, |j, inst| {
            let (pre, factor) = &factors[group[j]];
            evaluate(pre, &mults[j], inst, factor, &dirs, order)
        });
        let mut value = lin.dot(v);
        let mut grad = lin.clone();
        let mut hess = DMatrix::zeros(if order == Order::Hessian { nv } else { 0 }, if order == Order::Hessian { nv } else { 0 });
        for ev in parts {
            value += ev.value;
            if order != Order::Value {
                grad += ev.grad;
            }
            if let Some(h) = ev.hess {
                hess += h;
            }
        }
        value.is_finite().then_some(SmoothValue { value, grad, hess })
    };
    let mut blocks: Vec<LmiTerm> = reps
        .iter()
        .map(|&r| {
            let mu = (0..mults.len()).filter(|&j| group[j] == group[r]).map(|j| margins[j]).fold(f64::INFINITY, f64::min);
            stability_term_in_eta(layout, &mults[r].h_mat, p_tmpl, mu)
        })
        .collect();
    blocks.push(sigma_term(layout, opts.sigma_min));
    let mut p0: Vec<DVector<f64>> = reps.iter().map(|&r| svec(&p0s[r])).collect();
    p0.push(DVector::zeros(0));
    let bopts = BarrierOptions { rel_tol: opts.rel_tol, exec: opts.exec, ..Default::default() };
    let res = minimize(&objective, &blocks, layout.pack(eta_k), p0, &bopts)?;
    let certs: Vec<DMatrix<f64>> = group.iter().map(|&g| smat(res.p[g].as_slice(), n)).collect();
    let eta = layout.unpack(&res.v, &certs[0]);
    Ok((eta, certs, format!(
        "{} (barrier, {} Newton steps, gap {:.1e})",
        if res.stalled { "near-optimal" } else { "optimal" },
        res.newton_steps,
        res.gap_bound
    )))
}

/// Literal conic program over `(η, s_0..s_r, svec P_0..P_r)`.
pub fn mstep_program(
    eta_k: &ImplicitModel,
    insts: &[SimErrorInstance],
    mults: &[Multiplier],
    margins: &[f64],
    sigma_min: f64,
) -> Result<ConicProgram> {
    let layout = EtaLayout::new(eta_k.dims());
    let nv = layout.len();
    let n = layout.dims.nx;
    let np = svec_len(n);
    let r = insts.len();
    let total = nv + r + r * np;
    let t = insts[0].horizon() as f64;
    let rk = inv_pd(&eta_k.sigma_v, "Sigma_v")?;
    let mut prog = ConicProgram::new(total);
    for (q, d) in layout.directions().iter().enumerate() {
        if d.param == Param::SigmaV {
            prog.objective[q] = t * if d.i == d.j { rk[(d.i, d.i)] } else { 2.0 * rk[(d.i, d.j)] };
        }
    }
    for j in 0..r {
        prog.objective[nv + j] = 1.0;
    }
    for (j, (inst, mult)) in insts.iter().zip(mults).enumerate() {
        let f = |z: &DVector<f64>| epigraph_matrix(&layout.unpack(&z.rows(0, nv).into_owned(), &eta_k.p), z[nv], mult, inst);
        let (c0, coeffs) = affine_coefficients(f, nv + 1);
        let coeffs: Vec<(usize, DMatrix<f64>)> =
            coeffs.into_iter().enumerate().map(|(i, m)| (if i < nv { i } else { nv + j }, m)).collect();
        prog.add_dense_block(&c0, &coeffs);
        let term = stability_term_in_eta(&layout, &mult.h_mat, &eta_k.p, margins[j]);
        let mut coeffs = term.shared;
        coeffs.extend(term.private.into_iter().enumerate().map(|(k, b)| (nv + r + j * np + k, b)));
        prog.add_dense_block(&term.constant, &coeffs);
    }
    let st = sigma_term(&layout, sigma_min);
    prog.add_dense_block(&st.constant, &st.shared);
    Ok(prog)
}

fn conic(
    eta_k: &ImplicitModel,
    layout: &EtaLayout,
    insts: &[SimErrorInstance],
    mults: &[Multiplier],
    margins: &[f64],
    opts: &MStepOptions,
) -> Result<Solved> {
    let nv = layout.len();
    let n = layout.dims.nx;
    let np = svec_len(n);
    let r = insts.len();
    let prog = mstep_program(eta_k, insts, mults, margins, opts.sigma_min)?;
    let res = solve(&prog, &opts.sdp)?;
    if !res.status.is_solved() {
        return Err(LgssError::Solver(format!("M-step program: {} ({})", res.status.as_str(), res.message)));
    }
    let certs: Vec<DMatrix<f64>> =
        (0..r).map(|j| smat(&res.y.as_slice()[nv + r + j * np..nv + r + (j + 1) * np], n)).collect();
    let eta = layout.unpack(&res.y.rows(0, nv).into_owned(), &certs[0]);
    Ok((eta, certs, format!("{} (conic, {} iterations)", res.status.as_str(), res.iterations)))
}
