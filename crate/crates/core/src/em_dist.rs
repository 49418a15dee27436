//! EM with the initial state and the disturbance sequence as missing data.
//!
//! Each iteration smooths `Z = [x_1; w_1..w_{T-1}]`, updates `(μ, Σ1)` and
//! `Σw` in closed form, and updates the remaining parameters by minimising a
//! convex Lagrangian bound over models certified stable (see [`lagrangian`]).
//!
//! [`lagrangian`]: crate::lagrangian

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::history::{EmOptions, History, IterRecord, Termination};
use crate::inference::{disturbance_smoother, log_likelihood, SmoothedPosterior};
use crate::lagrangian::{simulation_error, solve_mstep, MStepOptions, SimErrorInstance};
use crate::lifted::{lift_explicit, stack};
use crate::linalg::{is_symmetric, sym};
use crate::model::{
    make_random_stable_system, Dimensions, ExplicitModel, ImplicitModel, NoiseLevels, RandomSystemSpec,
};
use crate::{LgssError, Result};

/// Relative eigenvalue cut-off for the rank-one split of `Ω`.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct EStepBundle {
    pub posterior: SmoothedPosterior,
    /// `Σ̂w = (1/T) Σ_t E[w_t w_t' | y]`.
    pub sigma_w_hat: DMatrix<f64>,
    /// `ω_j` with `Ω = Σ_j ω_j ω_j'`.
    pub rank_one_terms: Vec<DVector<f64>>,
    /// Instance 0 carries the data and smoothed means; the rest are homogeneous.
    pub instances: Vec<SimErrorInstance>,
    pub horizon: usize,
}

/// `Ω = Σ_j ω_j ω_j'` from the eigenpairs above `RANK_TOL · λ_max`, in
/// descending eigenvalue order; each `ω_j` has a non-negative largest entry.
pub fn rank_one_decompose(omega: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    if omega.nrows() != omega.ncols() {
        return Err(LgssError::DimensionMismatch("Omega must be square".into()));
    }
    let scale = omega.amax().max(f64::MIN_POSITIVE);
    if !is_symmetric(omega, 1e-10 * scale) {
        return Err(LgssError::InvalidModel("Omega is not symmetric".into()));
    }
    if omega.nrows() == 0 || omega.amax() == 0.0 {
        return Ok(Vec::new());
    }
    let eig = SymmetricEigen::new(sym(omega));
    let lmax = eig.eigenvalues.max();
    let mut idx: Vec<usize> = (0..omega.nrows()).filter(|&i| eig.eigenvalues[i] > RANK_TOL * lmax).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    Ok(idx
        .into_iter()
        .map(|i| {
            let mut v = eig.eigenvectors.column(i) * eig.eigenvalues[i].sqrt();
            let k = v.iamax();
            if v[k] < 0.0 {
                v.neg_mut();
            }
            v
        })
        .collect())
}

/// Split `vec([x1, w_1..w_{T-1}])` into `x1` and an `nw x T` disturbance
/// matrix whose last column is zero.
fn unstack(z: &DVector<f64>, nx: usize, nw: usize, t: usize) -> (DVector<f64>, DMatrix<f64>) {
    let x1 = z.rows(0, nx).into_owned();
    let mut w = DMatrix::zeros(nw, t);
    for j in 0..t - 1 {
        w.set_column(j, &z.rows(nx + j * nw, nw));
    }
    (x1, w)
}

pub fn estep(m: &ExplicitModel, u: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<EStepBundle> {
    m.validate()?;
    let t = m.check_signals(u, y)?;
    let d = m.dims();
    let posterior = disturbance_smoother(m, u, y)?;
    let sigma_w_hat = sym(&(posterior.w_second_moments.iter().sum::<DMatrix<f64>>() / t as f64));
    let rank_one_terms = rank_one_decompose(&posterior.omega)?;
    let mut instances = Vec::with_capacity(rank_one_terms.len() + 1);
    instances.push(SimErrorInstance {
        u: u.clone(),
        y: y.clone(),
        x1: posterior.x1_mean.clone(),
        w: posterior.w_mean.clone(),
    });
    for om in &rank_one_terms {
        let (x1, w) = unstack(om, d.nx, d.nw, t);
        instances.push(SimErrorInstance::homogeneous(d.nu, d.ny, x1, w));
    }
    Ok(EStepBundle { posterior, sigma_w_hat, rank_one_terms, instances, horizon: t })
}

/// `-½[r log 2π + log pdet S + tr(S⁺ M)]` for the second moment `M` about the
/// mean: the expected log-density of a possibly degenerate Gaussian w.r.t.
/// Lebesgue measure on its support. `-∞` if `M` has mass off the support.
fn expected_log_density(s: &DMatrix<f64>, m: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    if n == 0 {
        return 0.0;
    }
    if let Some(c) = s.clone().cholesky() {
        let ld = 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        return -0.5 * (n as f64 * (2.0 * PI).ln() + ld + c.solve(m).trace());
    }
    let eig = SymmetricEigen::new(sym(s));
    let smax = eig.eigenvalues.amax();
    let tol = 1e-12 * smax.max(f64::MIN_POSITIVE);
    let mscale = m.amax().max(1.0);
    let (mut r, mut ld, mut tr) = (0usize, 0.0, 0.0);
    for i in 0..n {
        let v = eig.eigenvectors.column(i);
        let q = (v.transpose() * m * v)[(0, 0)];
        if eig.eigenvalues[i] > tol {
            r += 1;
            ld += eig.eigenvalues[i].ln();
            tr += q / eig.eigenvalues[i];
        } else if q > 1e-12 * mscale {
            return f64::NEG_INFINITY;
        }
    }
    -0.5 * (r as f64 * (2.0 * PI).ln() + ld + tr)
}

/// Initial-state term `E[log p_θ(x_1) | y]`.
pub fn q1(theta: &ExplicitModel, b: &EStepBundle) -> f64 {
    let dx = &b.posterior.x1_mean - &theta.mu;
    expected_log_density(&theta.sigma1, &(&b.posterior.x1_cov + &dx * dx.transpose()))
}

/// Disturbance term `Σ_t E[log p_θ(w_t) | y]`, `t = 1..T`.
pub fn q2(theta: &ExplicitModel, b: &EStepBundle) -> f64 {
    b.horizon as f64 * expected_log_density(&theta.sigma_w, &b.sigma_w_hat)
}

/// Output term `E[log p_θ(y | x_1, w) | y]` from the lifted matrices of `θ`.
pub fn q3_direct(theta: &ExplicitModel, b: &EStepBundle) -> Result<f64> {
    let t = b.horizon;
    let inst = &b.instances[0];
    let lifted = lift_explicit(&theta.system(), t);
    let cf = &lifted.c_bar * &lifted.f_bar;
    let delta = stack(&inst.y) - &cf * &b.posterior.z_mean - (&lifted.c_bar * &lifted.g_bar + &lifted.d_bar) * stack(&inst.u);
    let second = &cf * &b.posterior.omega * cf.transpose() + &delta * delta.transpose();
    let sv = crate::linalg::chol(&theta.sigma_v, "Sigma_v")?;
    let ny = theta.dims().ny;
    let mut tr = 0.0;
    for k in 0..t {
        tr += sv.solve(&second.view((k * ny, k * ny), (ny, ny)).into_owned()).trace();
    }
    let ld = crate::linalg::logdet_pd(&theta.sigma_v, "Sigma_v")?;
    Ok(-0.5 * ((t * ny) as f64 * (2.0 * PI).ln() + t as f64 * ld + tr))
}

/// The same output term as a sum of simulation errors over the instances.
pub fn q3_instances(theta: &ExplicitModel, b: &EStepBundle) -> Result<f64> {
    let eta = ImplicitModel::from_system(&theta.system());
    let t = b.horizon as f64;
    let ny = theta.dims().ny as f64;
    let mut s = 0.0;
    for inst in &b.instances {
        s += simulation_error(&eta, inst)?;
    }
    let ld = crate::linalg::logdet_pd(&theta.sigma_v, "Sigma_v")?;
    Ok(-0.5 * (t * ny * (2.0 * PI).ln() + t * ld + s))
}

/// `Q(θ, θ_k) = Q1 + Q2 + Q3` on the log-density scale.
pub fn q_eval(theta: &ExplicitModel, b: &EStepBundle) -> Result<f64> {
    Ok(q1(theta, b) + q2(theta, b) + q3_instances(theta, b)?)
}

/// `(μ, Σ1) = (x̂_{1|T}, Σ̂_{1|T})`.
pub fn mstep_alpha(b: &EStepBundle) -> (DVector<f64>, DMatrix<f64>) {
    (b.posterior.x1_mean.clone(), b.posterior.x1_cov.clone())
}

pub fn mstep_beta(b: &EStepBundle) -> DMatrix<f64> {
    b.sigma_w_hat.clone()
}

#[derive(Debug, Clone)]
pub struct DistStep {
    pub model: ExplicitModel,
    pub bundle: EStepBundle,
    /// `Q̂` before/after the system update.
    pub qhat_before: f64,
    pub qhat_after: f64,
    /// The bound did not decrease, so the system matrices were kept.
    pub kept_system: bool,
    pub status: String,
}

/// Largest tolerated ratio `‖C e_i‖ / ‖e_i'[B G]‖` before the states are rescaled.
pub const BALANCE_RATIO: f64 = 1e4;

pub fn em_dist_iterate(
    m: &ExplicitModel,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
    opts: &MStepOptions,
) -> Result<DistStep> {
    let bundle = estep(m, u, y)?;
    let (mu, sigma1) = mstep_alpha(&bundle);
    let sigma_w = mstep_beta(&bundle);
    let eta_k = ImplicitModel::from_system(&m.system());
    let res = solve_mstep(&eta_k, &bundle.instances, opts)?;
    let mut next = ExplicitModel { mu, sigma1, sigma_w, ..m.clone() };
    // Guard against solver inaccuracy: the update must not raise the bound.
    let kept_system = !(res.qhat_after <= res.qhat_before);
    if !kept_system {
        let s = res.eta.to_explicit()?;
        next = next.with_system(&crate::model::SystemMatrices { sigma_v: sym(&s.sigma_v), ..s });
        // The bound is not invariant to state scaling, and the M-step can drift
        // along it (C -> 0, B -> inf); undo gross imbalance before the next E-step.
        if let Some(d) = next.balancing_scale(BALANCE_RATIO) {
            next = next.rescale_states(&d);
        }
    }
    Ok(DistStep {
        model: next,
        bundle,
        qhat_before: res.qhat_before,
        qhat_after: res.qhat_after,
        kept_system,
        status: if kept_system { format!("kept ({})", res.status) } else { res.status },
    })
}

/// Runs to the log-likelihood tolerance or `max_iters`. A failing iteration
/// ends the run with [`Termination::Failed`], keeping the last accepted model.
pub fn em_dist_run(
    m0: &ExplicitModel,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
    opts: &EmOptions,
    mopts: &MStepOptions,
) -> Result<History> {
    let initial_loglik = log_likelihood(m0, u, y)?;
    if !initial_loglik.is_finite() {
        return Err(LgssError::InvalidModel("initial log-likelihood is not finite".into()));
    }
    let mut h = History {
        initial_loglik,
        initial_spectral_radius: m0.spectral_radius(),
        records: Vec::new(),
        model: m0.clone(),
        termination: Termination::MaxIterations,
    };
    let mut prev = initial_loglik;
    for iter in 1..=opts.max_iters {
        let start = Instant::now();
        let step = em_dist_iterate(&h.model, u, y, mopts).and_then(|s| {
            let ll = log_likelihood(&s.model, u, y)?;
            Ok((s, ll))
        });
        let (s, ll) = match step {
            Ok(v) => v,
            Err(e) => {
                h.termination = Termination::Failed(e.to_string());
                break;
            }
        };
        h.records.push(IterRecord {
            iter,
            loglik: ll,
            spectral_radius: s.model.spectral_radius(),
            status: s.status,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        h.model = s.model;
        if ll - prev < opts.tol {
            h.termination = Termination::Converged;
            break;
        }
        prev = ll;
    }
    Ok(h)
}

/// Default starting point: a random stable system of radius 0.5, `μ = 0`,
/// `Σ1 = I`, and `Σw = Σv = I` scaled to the output variance.
pub fn default_initial_model(dims: Dimensions, y: &DMatrix<f64>, seed: u64) -> Result<ExplicitModel> {
    let n = y.len().max(1) as f64;
    let mean = y.sum() / n;
    let var = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-8);
    let spec = RandomSystemSpec {
        dims,
        spectral_radius: 0.5,
        identity_g: false,
        feedthrough: true,
        noise: NoiseLevels { sigma1: 1.0, sigma_w: var, sigma_v: var },
    };
    make_random_stable_system(&spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_splits_into_unit_vectors() {
        let terms = rank_one_decompose(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(terms.len(), 3);
        for (i, a) in terms.iter().enumerate() {
            assert!((a.norm() - 1.0).abs() < 1e-12);
            for b in &terms[i + 1..] {
                assert!(a.dot(b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outer_product_gives_one_term() {
        let z = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let terms = rank_one_decompose(&(&z * z.transpose())).unwrap();
        assert_eq!(terms.len(), 1);
        assert!((&terms[0] + &z).norm() < 1e-12 || (&terms[0] - &z).norm() < 1e-12);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(rank_one_decompose(&m).is_err());
    }

    #[test]
    fn degenerate_density_is_zero_on_a_point_mass() {
        assert_eq!(expected_log_density(&DMatrix::zeros(2, 2), &DMatrix::zeros(2, 2)), 0.0);
        assert_eq!(expected_log_density(&DMatrix::zeros(1, 1), &DMatrix::identity(1, 1)), f64::NEG_INFINITY);
    }
}
