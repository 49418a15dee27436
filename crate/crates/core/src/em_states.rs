//! EM with the state sequence as the missing data (`G = I`, full-rank `Sigma_w`).

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::history::{EmOptions, History, IterRecord, Termination};
use crate::inference::{log_likelihood, rts_smoother, SmoothedStates};
use crate::linalg::{chol, logdet_pd, sym};
use crate::model::ExplicitModel;
use crate::{LgssError, Result};

#[derive(Debug, Clone)]
pub struct StatesStep {
    pub model: ExplicitModel,
    /// `Sigma_w` was singular: `A`, `B`, `Sigma_w` were kept, only the rest updated.
    pub degenerate_estep: bool,
}

/// Smoothed sufficient statistics with `z_t = [x_t; u_t]`.
#[derive(Debug, Clone)]
pub struct StateMoments {
    pub horizon: usize,
    pub x1: DVector<f64>,
    pub p1: DMatrix<f64>,
    /// `sum_{t<T} E[z_t z_t']`
    pub zz_head: DMatrix<f64>,
    /// `sum_{t<T} E[x_{t+1} z_t']`
    pub xz_next: DMatrix<f64>,
    /// `sum_{t<T} E[x_{t+1} x_{t+1}']`
    pub xx_next: DMatrix<f64>,
    /// `sum_t E[z_t z_t']`
    pub zz_all: DMatrix<f64>,
    /// `sum_t y_t E[z_t]'`
    pub yz: DMatrix<f64>,
    pub yy: DMatrix<f64>,
    mean: Vec<DVector<f64>>,
    cov: Vec<DMatrix<f64>>,
    lag_cov: Vec<DMatrix<f64>>,
    u: DMatrix<f64>,
    y: DMatrix<f64>,
}

pub fn check_structure(m: &ExplicitModel) -> Result<()> {
    let d = m.validate()?;
    if d.nw < d.nx {
        return Err(LgssError::SingularModelUnsupported(format!(
            "disturbance dimension {} is below state dimension {}; the state-based M-step needs a full-rank process noise",
            d.nw, d.nx
        )));
    }
    if d.nw != d.nx || (&m.g - DMatrix::<f64>::identity(d.nx, d.nx)).amax() > 1e-12 {
        return Err(LgssError::InvalidModel("state-based EM requires G = I".into()));
    }
    chol(&m.sigma_v, "Sigma_v")?;
    Ok(())
}

pub fn state_moments(sm: &SmoothedStates, u: &DMatrix<f64>, y: &DMatrix<f64>) -> StateMoments {
    let t = sm.mean.len();
    let nx = sm.mean[0].len();
    let nu = u.nrows();
    let nz = nx + nu;
    let ezz = |k: usize| -> DMatrix<f64> {
        let x = &sm.mean[k];
        let uk = u.column(k);
        let mut m = DMatrix::zeros(nz, nz);
        m.view_mut((0, 0), (nx, nx)).copy_from(&(&sm.cov[k] + x * x.transpose()));
        let xu = x * uk.transpose();
        m.view_mut((0, nx), (nx, nu)).copy_from(&xu);
        m.view_mut((nx, 0), (nu, nx)).copy_from(&xu.transpose());
        m.view_mut((nx, nx), (nu, nu)).copy_from(&(uk * uk.transpose()));
        m
    };
    let mut zz_head = DMatrix::zeros(nz, nz);
    let mut zz_all = DMatrix::zeros(nz, nz);
    let mut xz_next = DMatrix::zeros(nx, nz);
    let mut xx_next = DMatrix::zeros(nx, nx);
    let mut yz = DMatrix::zeros(y.nrows(), nz);
    let mut yy = DMatrix::zeros(y.nrows(), y.nrows());
    for k in 0..t {
        let e = ezz(k);
        zz_all += &e;
        let mut ez = DVector::zeros(nz);
        ez.rows_mut(0, nx).copy_from(&sm.mean[k]);
        ez.rows_mut(nx, nu).copy_from(&u.column(k));
        yz += y.column(k) * ez.transpose();
        yy += y.column(k) * y.column(k).transpose();
        if k + 1 < t {
            zz_head += &e;
            let xn = &sm.mean[k + 1];
            let mut c = DMatrix::zeros(nx, nz);
            c.view_mut((0, 0), (nx, nx)).copy_from(&(&sm.lag_cov[k] + xn * sm.mean[k].transpose()));
            c.view_mut((0, nx), (nx, nu)).copy_from(&(xn * u.column(k).transpose()));
            xz_next += c;
            xx_next += &sm.cov[k + 1] + xn * xn.transpose();
        }
    }
    StateMoments {
        horizon: t,
        x1: sm.mean[0].clone(),
        p1: sm.cov[0].clone(),
        zz_head: sym(&zz_head),
        xz_next,
        xx_next: sym(&xx_next),
        zz_all: sym(&zz_all),
        yz,
        yy: sym(&yy),
        mean: sm.mean.clone(),
        cov: sm.cov.clone(),
        lag_cov: sm.lag_cov.clone(),
        u: u.clone(),
        y: y.clone(),
    }
}

impl StateMoments {
    /// `sum_{t<T} E[(x_{t+1} - A x_t - B u_t)(...)']`, accumulated per step as a sum
    /// of PSD terms to avoid cancellation when the states are large.
    pub fn transition_residual(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let nx = a.nrows();
        let mut acc = DMatrix::zeros(nx, nx);
        for k in 0..self.horizon.saturating_sub(1) {
            let r = &self.mean[k + 1] - a * &self.mean[k] - b * self.u.column(k);
            let lag = &self.lag_cov[k];
            let c = &self.cov[k + 1] - a * lag.transpose() - lag * a.transpose() + a * &self.cov[k] * a.transpose();
            acc += sym(&c) + &r * r.transpose();
        }
        sym(&acc)
    }

    /// `sum_t E[(y_t - C x_t - D u_t)(...)']`.
    pub fn output_residual(&self, c: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
        let ny = c.nrows();
        let mut acc = DMatrix::zeros(ny, ny);
        for k in 0..self.horizon {
            let r = self.y.column(k) - c * &self.mean[k] - d * self.u.column(k);
            acc += sym(&(c * &self.cov[k] * c.transpose())) + &r * r.transpose();
        }
        sym(&acc)
    }
}

/// `num * pinv(den)` with a relative cut-off, so unexcited input directions get zero weight.
fn regress(num: &DMatrix<f64>, den: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = den.nrows();
    let scale: Vec<f64> = (0..n).map(|i| if den[(i, i)] > 0.0 { den[(i, i)].sqrt() } else { 0.0 }).collect();
    let inv = |i: usize| if scale[i] > 0.0 { 1.0 / scale[i] } else { 0.0 };
    let scaled = DMatrix::from_fn(n, n, |i, j| den[(i, j)] * inv(i) * inv(j));
    let pinv = scaled.pseudo_inverse(1e-12).map_err(|e| LgssError::Numerical(e.to_string()))?;
    let pinv = DMatrix::from_fn(n, n, |i, j| pinv[(i, j)] * inv(i) * inv(j));
    Ok(num * pinv)
}

pub fn em_states_iterate(m: &ExplicitModel, u: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<StatesStep> {
    check_structure(m)?;
    let t = m.check_signals(u, y)?;
    let d = m.dims();
    let sm = rts_smoother(m, u, y)?;
    let mo = state_moments(&sm, u, y);
    let degenerate = m.sigma_w.clone().cholesky().is_none();
    let mut next = m.clone();
    next.mu = mo.x1.clone();
    next.sigma1 = mo.p1.clone();
    if !degenerate && t > 1 {
        let ab = regress(&mo.xz_next, &mo.zz_head)?;
        next.a = ab.columns(0, d.nx).into_owned();
        next.b = ab.columns(d.nx, d.nu).into_owned();
        next.sigma_w = mo.transition_residual(&next.a, &next.b) / (t - 1) as f64;
    }
    let cd = regress(&mo.yz, &mo.zz_all)?;
    next.c = cd.columns(0, d.nx).into_owned();
    next.d = cd.columns(d.nx, d.nu).into_owned();
    next.sigma_v = mo.output_residual(&next.c, &next.d) / t as f64;
    Ok(StatesStep { model: next, degenerate_estep: degenerate })
}

/// Expected complete-data log-likelihood `E[log p_θ(x_{1:T}, y) | y, θ_k]`
/// with the moments computed under `θ_k`. NaN where a covariance is singular.
pub fn q_states(theta: &ExplicitModel, mo: &StateMoments) -> f64 {
    let nx = theta.dims().nx as f64;
    let ny = theta.dims().ny as f64;
    let t = mo.horizon as f64;
    let ln2pi = (2.0 * PI).ln();
    let quad = |cov: &DMatrix<f64>, m: &DMatrix<f64>| -> Option<(f64, f64)> {
        let c = cov.clone().cholesky()?;
        let ld = logdet_pd(cov, "").ok()?;
        Some((ld, c.solve(m).trace()))
    };
    let dx = &mo.x1 - &theta.mu;
    let q1 = match quad(&theta.sigma1, &(&mo.p1 + &dx * dx.transpose())) {
        Some((ld, tr)) => -0.5 * (nx * ln2pi + ld + tr),
        None => return f64::NAN,
    };
    let q = sym(&(&theta.g * &theta.sigma_w * theta.g.transpose()));
    let q2 = if mo.horizon > 1 {
        match quad(&q, &mo.transition_residual(&theta.a, &theta.b)) {
            Some((ld, tr)) => -0.5 * ((t - 1.0) * (nx * ln2pi + ld) + tr),
            None => return f64::NAN,
        }
    } else {
        0.0
    };
    let q3 = match quad(&theta.sigma_v, &mo.output_residual(&theta.c, &theta.d)) {
        Some((ld, tr)) => -0.5 * (t * (ny * ln2pi + ld) + tr),
        None => return f64::NAN,
    };
    q1 + q2 + q3
}

pub fn em_states_run(m0: &ExplicitModel, u: &DMatrix<f64>, y: &DMatrix<f64>, opts: &EmOptions) -> Result<History> {
    check_structure(m0)?;
    let initial_loglik = log_likelihood(m0, u, y)?;
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
        let step = match em_states_iterate(&h.model, u, y).and_then(|s| {
            let ll = log_likelihood(&s.model, u, y)?;
            Ok((s, ll))
        }) {
            Ok(v) => v,
            Err(e) => {
                h.termination = Termination::Failed(e.to_string());
                break;
            }
        };
        let (s, ll) = step;
        h.records.push(IterRecord {
            iter,
            loglik: ll,
            spectral_radius: s.model.spectral_radius(),
            status: if s.degenerate_estep { "degenerate_estep".into() } else { "ok".into() },
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
