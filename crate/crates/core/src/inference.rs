//! Kalman filtering, likelihood evaluation and fixed-interval smoothing.
//!
//! The smoother uses the backward information recursions
//! `r_{t-1} = C'S_t^{-1}v_t + L_t' r_t`, `N_{t-1} = C'S_t^{-1}C + L_t' N_t L_t`
//! with `L_t = A - K_t C`. Because nothing is inverted apart from the innovation
//! covariances, singular `Sigma1`, `Sigma_w` and `G Sigma_w G'` are handled.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::lifted::{lift_explicit, stack};
use crate::linalg::{chol, is_zero, logdet_pd, sym};
use crate::model::{outputs, simulate, ExplicitModel};
use crate::{LgssError, Result};

/// Largest horizon accepted by the dense lifted oracle.
pub const ORACLE_MAX_HORIZON: usize = 100;

#[derive(Debug, Clone)]
pub struct FilterResult {
    /// `x̂_{t|t-1}`, `P_{t|t-1}`.
    pub pred_mean: Vec<DVector<f64>>,
    pub pred_cov: Vec<DMatrix<f64>>,
    pub filt_mean: Vec<DVector<f64>>,
    pub filt_cov: Vec<DMatrix<f64>>,
    pub innovation: Vec<DVector<f64>>,
    pub innovation_cov: Vec<DMatrix<f64>>,
    pub innovation_cov_inv: Vec<DMatrix<f64>>,
    /// Filter gain `P C' S^{-1}`.
    pub gain: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

pub fn kalman_filter(m: &ExplicitModel, u: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<FilterResult> {
    m.validate()?;
    let t = m.check_signals(u, y)?;
    let ny = m.dims().ny;
    let nx = m.dims().nx;
    let q = sym(&(&m.g * &m.sigma_w * m.g.transpose()));
    let eye = DMatrix::<f64>::identity(nx, nx);

    let mut out = FilterResult {
        pred_mean: Vec::with_capacity(t),
        pred_cov: Vec::with_capacity(t),
        filt_mean: Vec::with_capacity(t),
        filt_cov: Vec::with_capacity(t),
        innovation: Vec::with_capacity(t),
        innovation_cov: Vec::with_capacity(t),
        innovation_cov_inv: Vec::with_capacity(t),
        gain: Vec::with_capacity(t),
        loglik: 0.0,
    };
    let mut xp = m.mu.clone();
    let mut pp = m.sigma1.clone();
    for k in 0..t {
        let v = y.column(k) - &m.c * &xp - &m.d * u.column(k);
        let s = sym(&(&m.c * &pp * m.c.transpose() + &m.sigma_v));
        let sc = chol(&s, &format!("innovation covariance at t={}", k + 1))?;
        let sinv = sym(&sc.inverse());
        let kf = &pp * m.c.transpose() * &sinv;
        let xf = &xp + &kf * &v;
        let ikc = &eye - &kf * &m.c;
        let pf = sym(&(&ikc * &pp * ikc.transpose() + &kf * &m.sigma_v * kf.transpose()));
        let logdet = 2.0 * sc.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        out.loglik += -0.5 * (ny as f64 * (2.0 * PI).ln() + logdet + v.dot(&(&sinv * &v)));

        let xn = &m.a * &xf + &m.b * u.column(k);
        let pn = sym(&(&m.a * &pf * m.a.transpose() + &q));
        out.pred_mean.push(xp);
        out.pred_cov.push(pp);
        out.filt_mean.push(xf);
        out.filt_cov.push(pf);
        out.innovation.push(v);
        out.innovation_cov.push(s);
        out.innovation_cov_inv.push(sinv);
        out.gain.push(kf);
        xp = xn;
        pp = pn;
    }
    Ok(out)
}

/// `log p_θ(y | u)`. When both `Sigma1` and `Sigma_w` vanish the state is
/// deterministic and the likelihood reduces to the output-error density.
pub fn log_likelihood(m: &ExplicitModel, u: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    m.validate()?;
    let t = m.check_signals(u, y)?;
    if is_zero(&m.sigma1) && is_zero(&m.sigma_w) {
        let x = simulate(m, u, &m.mu, &DMatrix::zeros(m.dims().nw, t))?;
        let e = y - outputs(&m.c, &m.d, &x, u);
        let c = chol(&m.sigma_v, "Sigma_v")?;
        let ld = logdet_pd(&m.sigma_v, "Sigma_v")?;
        let ny = m.dims().ny as f64;
        let mut ll = 0.0;
        for k in 0..t {
            let ek = e.column(k).into_owned();
            ll += -0.5 * (ny * (2.0 * PI).ln() + ld + ek.dot(&c.solve(&ek)));
        }
        return Ok(ll);
    }
    Ok(kalman_filter(m, u, y)?.loglik)
}

/// Posterior of `Z = [x_1; w_1; ...; w_{T-1}]` and the derived second moments.
#[derive(Debug, Clone)]
pub struct SmoothedPosterior {
    pub x1_mean: DVector<f64>,
    pub x1_cov: DMatrix<f64>,
    /// Stacked `Ẑ`.
    pub z_mean: DVector<f64>,
    /// `Cov(Z | y)`.
    pub omega: DMatrix<f64>,
    /// `ŵ_1..ŵ_T` as columns (`ŵ_T = 0`).
    pub w_mean: DMatrix<f64>,
    /// `E[w_t w_t' | y]`, `t = 1..T` (the last equals the prior `Sigma_w`).
    pub w_second_moments: Vec<DMatrix<f64>>,
    /// Output residual of the smoothed simulation, stacked (`T ny`).
    pub residual: DVector<f64>,
    pub loglik: f64,
}

#[derive(Debug, Clone)]
pub struct SmoothedStates {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
    /// `Cov(x_{t+1}, x_t | y)` for `t = 1..T-1`.
    pub lag_cov: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

struct Backward {
    /// `r_0..r_T`
    r: Vec<DVector<f64>>,
    /// `N_0..N_T`
    n: Vec<DMatrix<f64>>,
    /// `L_1..L_T`
    l: Vec<DMatrix<f64>>,
}

fn backward(m: &ExplicitModel, f: &FilterResult) -> Backward {
    let t = f.innovation.len();
    let nx = m.dims().nx;
    let mut r = vec![DVector::zeros(nx); t + 1];
    let mut n = vec![DMatrix::zeros(nx, nx); t + 1];
    let l: Vec<DMatrix<f64>> = f.gain.iter().map(|kf| &m.a - &m.a * kf * &m.c).collect();
    let ct = m.c.transpose();
    for k in (0..t).rev() {
        let csi = &ct * &f.innovation_cov_inv[k];
        r[k] = &csi * &f.innovation[k] + l[k].transpose() * &r[k + 1];
        n[k] = sym(&(&csi * &m.c + l[k].transpose() * &n[k + 1] * &l[k]));
    }
    Backward { r, n, l }
}

/// Fixed-interval state smoother (Rauch–Tung–Striebel gain form). Falls back to
/// the information-form recursions when a predicted covariance is singular.
pub fn rts_smoother(m: &ExplicitModel, u: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<SmoothedStates> {
    let f = kalman_filter(m, u, y)?;
    match rts_gain_form(m, &f) {
        Some(s) => Ok(s),
        None => Ok(rts_information_form(m, &f)),
    }
}

fn rts_gain_form(m: &ExplicitModel, f: &FilterResult) -> Option<SmoothedStates> {
    let t = f.innovation.len();
    let mut mean = f.filt_mean.clone();
    let mut cov = f.filt_cov.clone();
    let mut lag_cov = vec![DMatrix::zeros(0, 0); t.saturating_sub(1)];
    for k in (0..t.saturating_sub(1)).rev() {
        let pc = f.pred_cov[k + 1].clone().cholesky()?;
        // J = P_{k|k} A' P_{k+1|k}^{-1}
        let j = pc.solve(&(&m.a * &f.filt_cov[k])).transpose();
        mean[k] = &f.filt_mean[k] + &j * (&mean[k + 1] - &f.pred_mean[k + 1]);
        cov[k] = sym(&(&f.filt_cov[k] + &j * (&cov[k + 1] - &f.pred_cov[k + 1]) * j.transpose()));
        lag_cov[k] = &cov[k + 1] * j.transpose();
    }
    Some(SmoothedStates { mean, cov, lag_cov, loglik: f.loglik })
}

fn rts_information_form(m: &ExplicitModel, f: &FilterResult) -> SmoothedStates {
    let b = backward(m, f);
    let t = f.innovation.len();
    let nx = m.dims().nx;
    let eye = DMatrix::<f64>::identity(nx, nx);
    let mean = (0..t).map(|k| &f.pred_mean[k] + &f.pred_cov[k] * &b.r[k]).collect();
    let cov = (0..t)
        .map(|k| sym(&(&f.pred_cov[k] - &f.pred_cov[k] * &b.n[k] * &f.pred_cov[k])))
        .collect();
    let lag_cov = (0..t.saturating_sub(1))
        .map(|k| {
            // Cov(x_k, x_{k+1}) = P_k L_k' (I - N_{k+1} P_{k+1}); transpose for (x_{k+1}, x_k)
            (&f.pred_cov[k] * b.l[k].transpose() * (&eye - &b.n[k + 1] * &f.pred_cov[k + 1])).transpose()
        })
        .collect();
    SmoothedStates { mean, cov, lag_cov, loglik: f.loglik }
}

/// Smoothed initial state and disturbances with the full joint covariance `Ω`.
pub fn disturbance_smoother(m: &ExplicitModel, u: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<SmoothedPosterior> {
    let f = kalman_filter(m, u, y)?;
    let b = backward(m, &f);
    let t = f.innovation.len();
    let d = m.dims();
    let (nx, nw) = (d.nx, d.nw);
    let gsw = &m.g * &m.sigma_w; // G Σw
    let swgt = gsw.transpose(); // Σw G'

    let x1_mean = &m.mu + &m.sigma1 * &b.r[0];
    let x1_cov = sym(&(&m.sigma1 - &m.sigma1 * &b.n[0] * &m.sigma1));
    let mut w_mean = DMatrix::zeros(nw, t);
    for k in 0..t {
        w_mean.set_column(k, &(&swgt * &b.r[k + 1]));
    }

    let dim_z = nx + t.saturating_sub(1) * nw;
    let mut omega = DMatrix::zeros(dim_z, dim_z);
    omega.view_mut((0, 0), (nx, nx)).copy_from(&x1_cov);
    let mut w_cov_diag = Vec::with_capacity(t);
    for j in 0..t {
        let x = &b.n[j + 1] * &gsw;
        let diag = sym(&(&m.sigma_w - &swgt * &x));
        w_cov_diag.push(diag.clone());
        if j + 1 >= t {
            continue;
        }
        let oj = nx + j * nw;
        omega.view_mut((oj, oj), (nw, nw)).copy_from(&diag);
        let mut yv = x;
        for i in (0..j).rev() {
            yv = b.l[i + 1].transpose() * &yv;
            let blk = -(&swgt * &yv);
            let oi = nx + i * nw;
            omega.view_mut((oi, oj), (nw, nw)).copy_from(&blk);
            omega.view_mut((oj, oi), (nw, nw)).copy_from(&blk.transpose());
        }
        yv = b.l[0].transpose() * &yv;
        let blk = -(&m.sigma1 * &yv);
        omega.view_mut((0, oj), (nx, nw)).copy_from(&blk);
        omega.view_mut((oj, 0), (nw, nx)).copy_from(&blk.transpose());
    }

    let mut z_mean = DVector::zeros(dim_z);
    z_mean.rows_mut(0, nx).copy_from(&x1_mean);
    for j in 0..t.saturating_sub(1) {
        z_mean.rows_mut(nx + j * nw, nw).copy_from(&w_mean.column(j));
    }
    let w_second_moments = (0..t)
        .map(|k| {
            let wk = w_mean.column(k);
            sym(&(&w_cov_diag[k] + wk * wk.transpose()))
        })
        .collect();
    let x = simulate(m, u, &x1_mean, &w_mean)?;
    let residual = stack(&(y - outputs(&m.c, &m.d, &x, u)));
    Ok(SmoothedPosterior {
        x1_mean,
        x1_cov,
        z_mean,
        omega: sym(&omega),
        w_mean,
        w_second_moments,
        residual,
        loglik: f.loglik,
    })
}

/// Dense Gaussian conditioning of `Z` on the stacked output; an independent
/// check of the recursive smoother for `T <= 100`.
pub fn lifted_conditioning_oracle(
    m: &ExplicitModel,
    u: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<SmoothedPosterior> {
    m.validate()?;
    let t = m.check_signals(u, y)?;
    if t > ORACLE_MAX_HORIZON {
        return Err(LgssError::TooLarge(format!("oracle horizon {t} exceeds {ORACLE_MAX_HORIZON}")));
    }
    let d = m.dims();
    let (nx, nw) = (d.nx, d.nw);
    let lifted = lift_explicit(&m.system(), t);
    let dim_z = nx + (t - 1) * nw;
    let mut prior_mean = DVector::zeros(dim_z);
    prior_mean.rows_mut(0, nx).copy_from(&m.mu);
    let mut prior_cov = DMatrix::zeros(dim_z, dim_z);
    prior_cov.view_mut((0, 0), (nx, nx)).copy_from(&m.sigma1);
    for j in 0..t - 1 {
        prior_cov.view_mut((nx + j * nw, nx + j * nw), (nw, nw)).copy_from(&m.sigma_w);
    }
    let cf = &lifted.c_bar * &lifted.f_bar;
    let uu = stack(u);
    let yy = stack(y);
    let y_mean = &cf * &prior_mean + (&lifted.c_bar * &lifted.g_bar + &lifted.d_bar) * &uu;
    let s_yy = sym(&(&cf * &prior_cov * cf.transpose() + &lifted.sigma_bar));
    let s_zy = &prior_cov * cf.transpose();
    let sc = chol(&s_yy, "stacked output covariance")?;
    let innov = &yy - &y_mean;
    let gain_t = sc.solve(&s_zy.transpose()); // S_yy^{-1} S_yz
    let z_mean = &prior_mean + gain_t.transpose() * &innov;
    let omega = sym(&(&prior_cov - &s_zy * &gain_t));
    let logdet = 2.0 * sc.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let loglik = -0.5 * ((t * d.ny) as f64 * (2.0 * PI).ln() + logdet + innov.dot(&sc.solve(&innov)));

    let x1_mean = z_mean.rows(0, nx).into_owned();
    let x1_cov = omega.view((0, 0), (nx, nx)).into_owned();
    let mut w_mean = DMatrix::zeros(nw, t);
    let mut w_second_moments = Vec::with_capacity(t);
    for j in 0..t - 1 {
        let wj = z_mean.rows(nx + j * nw, nw).into_owned();
        let cov = omega.view((nx + j * nw, nx + j * nw), (nw, nw)).into_owned();
        w_second_moments.push(sym(&(cov + &wj * wj.transpose())));
        w_mean.set_column(j, &wj);
    }
    w_second_moments.push(m.sigma_w.clone());
    let residual = &yy - &cf * &z_mean - (&lifted.c_bar * &lifted.g_bar + &lifted.d_bar) * &uu;
    Ok(SmoothedPosterior { x1_mean, x1_cov, z_mean, omega, w_mean, w_second_moments, residual, loglik })
}
