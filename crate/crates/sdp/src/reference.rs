//! Slow but simple feasibility check used to sanity-check the interior-point
//! solver on tiny programs: projected gradient descent on the squared
//! eigenvalue deficit `sum_b sum_i min(λ_i(F_b(y)) - margin, 0)^2` over a box.

use nalgebra::{DMatrix, DVector};

use crate::{ConicProgram, SdpError};

/// Largest block size accepted.
pub const MAX_BLOCK: usize = 6;

#[derive(Debug, Clone)]
pub struct ReferenceOptions {
    pub margin: f64,
    pub bound: f64,
    pub max_iters: usize,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self { margin: 1e-6, bound: 1e3, max_iters: 20_000 }
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceResult {
    pub feasible: bool,
    pub y: DVector<f64>,
    pub min_eigenvalue: f64,
    pub penalty: f64,
}

fn penalty(p: &ConicProgram, y: &DVector<f64>, margin: f64, grad: Option<&mut DVector<f64>>) -> (f64, f64) {
    let mut total = 0.0;
    let mut lmin = f64::INFINITY;
    let mut g = DVector::zeros(p.n_vars);
    for b in &p.blocks {
        let eig = b.slack(y).symmetric_eigen();
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            lmin = lmin.min(l);
            let d = l - margin;
            if d < 0.0 {
                total += d * d;
                let v = eig.eigenvectors.column(i).into_owned();
                for (&k, f) in &b.coeffs {
                    let fv: DMatrix<f64> = f.to_dense();
                    g[k] += 2.0 * d * (v.transpose() * &fv * &v)[(0, 0)];
                }
            }
        }
    }
    if let Some(out) = grad {
        *out = g;
    }
    (total, lmin)
}

/// Looks for `y` in `[-bound, bound]^n` with every block `⪰ margin·I`.
pub fn penalty_feasibility(p: &ConicProgram, opts: &ReferenceOptions) -> Result<ReferenceResult, SdpError> {
    p.validate()?;
    if let Some(b) = p.blocks.iter().find(|b| b.dim > MAX_BLOCK) {
        return Err(SdpError::InvalidProgram(format!(
            "reference path limited to blocks of size <= {MAX_BLOCK}, got {}",
            b.dim
        )));
    }
    if !p.eq_rows.is_empty() {
        return Err(SdpError::InvalidProgram("reference path does not handle equalities".into()));
    }
    let project = |y: &mut DVector<f64>| y.iter_mut().for_each(|v| *v = v.clamp(-opts.bound, opts.bound));
    let mut y = DVector::zeros(p.n_vars);
    let mut g = DVector::zeros(p.n_vars);
    let (mut f, mut lmin) = penalty(p, &y, opts.margin, Some(&mut g));
    let mut step = 1.0;
    for _ in 0..opts.max_iters {
        if f == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = &y - &g * step;
            project(&mut trial);
            let (ft, lt) = penalty(p, &trial, opts.margin, None);
            let dec = (&trial - &y).norm_squared() / step;
            if ft <= f - 1e-4 * dec {
                y = trial;
                f = ft;
                lmin = lt;
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        penalty(p, &y, opts.margin, Some(&mut g));
    }
    Ok(ReferenceResult { feasible: lmin >= opts.margin * (1.0 - 1e-9), y, min_eigenvalue: lmin, penalty: f })
}
