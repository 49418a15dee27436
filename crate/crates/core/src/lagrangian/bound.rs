//! Structured evaluation of the bound `Ĵ` for one instance.
//!
//! With `e_t = r_t - C x_t`, `ℱ_1 = E x_1 - E x̃1`, `ℱ_{t+1} = E x_{t+1} - F x_t - K u_t - L w_t`
//! and `λ_t = H x_t + h_t`,
//!
//! ```text
//! J(x) = Σ_t e_t' R e_t - 2 Σ_t λ_t' ℱ_t = -x' N x + 2 b' x + c,   R = Σv⁻¹
//! ```
//!
//! where `N` is block tridiagonal with diagonal `H'E + E'H - C'RC` and
//! off-diagonal `-H'F`. The supremum is attained at `x* = N⁻¹ b` when `N ≻ 0`.
//! Derivatives with respect to the parameters use the envelope theorem:
//! `∇Ĵ = ∂_v J(x*)`, `∇²Ĵ = ∂²_vv J + ½ G' N⁻¹ G` with `G = ∂_v ∇_x J`.

use nalgebra::{DMatrix, DVector};

use super::{Direction, Multiplier, Param, SimErrorInstance};
use crate::linalg::inv_pd;
use crate::model::ImplicitModel;
use crate::{LgssError, Result};

/// Column-major dense copy with allocation-free products.
#[derive(Debug, Clone)]
pub(crate) struct Flat {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl Flat {
    pub(crate) fn new(m: &DMatrix<f64>) -> Self {
        Self { r: m.nrows(), c: m.ncols(), d: m.as_slice().to_vec() }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i + j * self.r]
    }

    /// `out += s A x`
    #[inline]
    fn gemv(&self, s: f64, x: &[f64], out: &mut [f64]) {
        for j in 0..self.c {
            let xj = s * x[j];
            if xj != 0.0 {
                let col = &self.d[j * self.r..(j + 1) * self.r];
                for (o, a) in out.iter_mut().zip(col) {
                    *o += a * xj;
                }
            }
        }
    }

    /// `out += s A' x`
    #[inline]
    fn gemv_t(&self, s: f64, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate().take(self.c) {
            let col = &self.d[j * self.r..(j + 1) * self.r];
            *o += s * dot(col, x);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Block Cholesky `N = L L'` of the block-tridiagonal curvature matrix.
#[derive(Debug, Clone)]
pub struct TridiagFactor {
    n: usize,
    t: usize,
    /// Lower-triangular diagonal factors, `n*n` each.
    diag: Vec<f64>,
    /// Sub-diagonal blocks `W_t` (t = 1..T-1), `n*n` each.
    sub: Vec<f64>,
}

impl TridiagFactor {
    /// Fails with `Unbounded` when `N` is not positive definite.
    pub fn new(eta: &ImplicitModel, h_mat: &DMatrix<f64>, r: &DMatrix<f64>, t: usize) -> Result<Self> {
        let n = eta.e.nrows();
        let ht = h_mat.transpose();
        let he = &ht * &eta.e;
        let nd = &he + he.transpose() - eta.c.transpose() * r * &eta.c;
        let s = -(&ht * &eta.f);
        let mut diag = Vec::with_capacity(t * n * n);
        let mut sub = Vec::with_capacity(t.saturating_sub(1) * n * n);
        let unbounded = |k: usize| LgssError::Unbounded(format!("curvature matrix is not positive definite at step {k}"));
        let mut prev = nd.clone().cholesky().ok_or_else(|| unbounded(0))?.l();
        diag.extend_from_slice(prev.as_slice());
        for k in 1..t {
            // W L_{k-1}' = S
            let wt = prev.solve_lower_triangular(&s.transpose()).ok_or_else(|| unbounded(k))?;
            let w = wt.transpose();
            let schur = &nd - &w * &wt;
            let l = schur.cholesky().ok_or_else(|| unbounded(k))?.l();
            sub.extend_from_slice(w.as_slice());
            diag.extend_from_slice(l.as_slice());
            prev = l;
        }
        Ok(Self { n, t, diag, sub })
    }

    pub fn horizon(&self) -> usize {
        self.t
    }

    fn l(&self, k: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.diag[k * nn..(k + 1) * nn]
    }

    fn w(&self, k: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.sub[(k - 1) * nn..k * nn]
    }

    /// In-place `b <- L⁻¹ b`, so that `b'N⁻¹b = |L⁻¹b|²`.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for k in 0..self.t {
            if k > 0 {
                let (head, tail) = b.split_at_mut(k * n);
                let w = self.w(k);
                let z_prev = &head[(k - 1) * n..];
                for j in 0..n {
                    let zj = z_prev[j];
                    for i in 0..n {
                        tail[i] -= w[i + j * n] * zj;
                    }
                }
            }
            forward(self.l(k), n, &mut b[k * n..(k + 1) * n]);
        }
    }

    /// `Z <- Z L⁻ᵀ` for `Z` with `n*T` columns, i.e. [`Self::forward_in_place`]
    /// applied to every row at once.
    pub fn forward_rows_in_place(&self, z: &mut DMatrix<f64>) {
        let (n, k) = (self.n, z.nrows());
        let data = z.as_mut_slice();
        let axpy = |data: &mut [f64], src: usize, dst: usize, a: f64| {
            let (head, tail) = data.split_at_mut(dst * k);
            for (d, s) in tail[..k].iter_mut().zip(&head[src * k..(src + 1) * k]) {
                *d -= a * s;
            }
        };
        for t in 0..self.t {
            if t > 0 {
                let w = self.w(t);
                for j in 0..n {
                    for i in 0..n {
                        if w[i + j * n] != 0.0 {
                            axpy(data, (t - 1) * n + j, t * n + i, w[i + j * n]);
                        }
                    }
                }
            }
            let l = self.l(t);
            for i in 0..n {
                for j in 0..i {
                    axpy(data, t * n + j, t * n + i, l[i + j * n]);
                }
                let inv = 1.0 / l[i + i * n];
                data[(t * n + i) * k..(t * n + i + 1) * k].iter_mut().for_each(|v| *v *= inv);
            }
        }
    }

    /// In-place `b <- N⁻¹ b` for a stacked `n*T` vector.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let mut tmp = vec![0.0; n];
        self.forward_in_place(b);
        for k in (0..self.t).rev() {
            if k + 1 < self.t {
                let (head, tail) = b.split_at_mut((k + 1) * n);
                let w = self.w(k + 1);
                for (j, t) in tmp.iter_mut().enumerate() {
                    *t = dot(&w[j * n..(j + 1) * n], &tail[..n]);
                }
                for (i, t) in tmp.iter().enumerate() {
                    head[k * n + i] -= t;
                }
            }
            backward(self.l(k), n, &mut b[k * n..(k + 1) * n]);
        }
    }
}

fn forward(l: &[f64], n: usize, x: &mut [f64]) {
    for i in 0..n {
        let mut s = x[i];
        for j in 0..i {
            s -= l[i + j * n] * x[j];
        }
        x[i] = s / l[i + i * n];
    }
}

fn backward(l: &[f64], n: usize, x: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= l[j + i * n] * x[j];
        }
        x[i] = s / l[i + i * n];
    }
}

/// Value, maximiser and derivatives of `Ĵ` at one parameter point.
#[derive(Debug, Clone)]
pub struct BoundEval {
    pub value: f64,
    /// Maximising state sequence, `nx x T`.
    pub x: DMatrix<f64>,
    pub grad: DVector<f64>,
    pub hess: Option<DMatrix<f64>>,
}

/// How much to compute beyond the value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    Gradient,
    Hessian,
}

pub(crate) struct Prepared {
    e: Flat,
    f: Flat,
    k: Flat,
    l: Flat,
    c: Flat,
    d: Flat,
    r: Flat,
    ctr: Flat,
    h_mat: Flat,
    pub(crate) r_dense: DMatrix<f64>,
}

impl Prepared {
    pub(crate) fn new(eta: &ImplicitModel, h_mat: &DMatrix<f64>) -> Result<Self> {
        let r = inv_pd(&eta.sigma_v, "Sigma_v")?;
        Ok(Self {
            e: Flat::new(&eta.e),
            f: Flat::new(&eta.f),
            k: Flat::new(&eta.k),
            l: Flat::new(&eta.l),
            c: Flat::new(&eta.c),
            d: Flat::new(&eta.d),
            ctr: Flat::new(&(eta.c.transpose() * &r)),
            r: Flat::new(&r),
            h_mat: Flat::new(h_mat),
            r_dense: r,
        })
    }
}

/// Full evaluation with an existing factorisation of `N`.
pub(crate) fn evaluate(
    pre: &Prepared,
    mult: &Multiplier,
    inst: &SimErrorInstance,
    factor: &TridiagFactor,
    dirs: &[Direction],
    order: Order,
) -> BoundEval {
    let n = pre.e.r;
    let ny = pre.c.r;
    let nu = pre.k.c;
    let nw = pre.l.c;
    let tt = inst.horizon();
    let u = inst.u.as_slice();
    let w = inst.w.as_slice();
    let y = inst.y.as_slice();
    let h = mult.h.as_slice();
    let x1 = inst.x1.as_slice();

    let mut rr = y.to_vec();
    let mut kap = vec![0.0; n * tt];
    for t in 0..tt {
        pre.d.gemv(-1.0, &u[t * nu..(t + 1) * nu], &mut rr[t * ny..(t + 1) * ny]);
        let kt = &mut kap[t * n..(t + 1) * n];
        if t == 0 {
            pre.e.gemv(-1.0, x1, kt);
        } else {
            pre.k.gemv(-1.0, &u[(t - 1) * nu..t * nu], kt);
            pre.l.gemv(-1.0, &w[(t - 1) * nw..t * nw], kt);
        }
    }

    let mut x = vec![0.0; n * tt];
    for t in 0..tt {
        let bt = &mut x[t * n..(t + 1) * n];
        pre.ctr.gemv(-1.0, &rr[t * ny..(t + 1) * ny], bt);
        pre.h_mat.gemv_t(-1.0, &kap[t * n..(t + 1) * n], bt);
        pre.e.gemv_t(-1.0, &h[t * n..(t + 1) * n], bt);
        if t + 1 < tt {
            pre.f.gemv_t(1.0, &h[(t + 1) * n..(t + 2) * n], bt);
        }
    }
    factor.solve_in_place(&mut x);

    let mut e = rr;
    let mut rho = vec![0.0; ny * tt];
    let mut cf = kap;
    let mut lam = h.to_vec();
    let mut value = 0.0;
    for t in 0..tt {
        let xt = &x[t * n..(t + 1) * n];
        let et = &mut e[t * ny..(t + 1) * ny];
        pre.c.gemv(-1.0, xt, et);
        pre.r.gemv(1.0, et, &mut rho[t * ny..(t + 1) * ny]);
        let ft = &mut cf[t * n..(t + 1) * n];
        pre.e.gemv(1.0, xt, ft);
        if t > 0 {
            pre.f.gemv(-1.0, &x[(t - 1) * n..t * n], ft);
        }
        let lt = &mut lam[t * n..(t + 1) * n];
        pre.h_mat.gemv(1.0, xt, lt);
        value += dot(&e[t * ny..(t + 1) * ny], &rho[t * ny..(t + 1) * ny]) - 2.0 * dot(lt, ft);
    }

    let xm = DMatrix::from_vec(n, tt, x.clone());
    if order == Order::Value {
        return BoundEval { value, x: xm, grad: DVector::zeros(0), hess: None };
    }

    let want_h = order == Order::Hessian;
    let k = dirs.len();
    let mut grad = DVector::zeros(k);
    let mut cols = if want_h { vec![0.0; k * n * tt] } else { Vec::new() };
    // S ρ_t series for Σv directions, used by the second-order terms.
    let mut s_rho: Vec<Option<Vec<f64>>> = vec![None; k];

    let mut empty: [f64; 0] = [];
    let xs = |t: usize, b: usize| x[t * n + b];
    for (q, dir) in dirs.iter().enumerate() {
        let (a, b) = (dir.i, dir.j);
        let mut g = 0.0;
        let col: &mut [f64] = if want_h { &mut cols[q * n * tt..(q + 1) * n * tt] } else { &mut empty };
        // Shared handling of directions that only perturb row `a` of ℱ_t.
        let dyn_row = |df: &dyn Fn(usize) -> f64, col: &mut [f64]| {
            let mut g = 0.0;
            for t in 0..tt {
                let d = df(t);
                if d == 0.0 {
                    continue;
                }
                g -= 2.0 * lam[t * n + a] * d;
                if want_h {
                    for c in 0..n {
                        col[t * n + c] -= 2.0 * pre.h_mat.at(a, c) * d;
                    }
                }
            }
            g
        };
        match dir.param {
            Param::E => {
                g += dyn_row(&|t| xs(t, b) - if t == 0 { x1[b] } else { 0.0 }, col);
                if want_h {
                    for t in 0..tt {
                        col[t * n + b] -= 2.0 * lam[t * n + a];
                    }
                }
            }
            Param::F => {
                g += dyn_row(&|t| if t == 0 { 0.0 } else { -xs(t - 1, b) }, col);
                if want_h {
                    for t in 0..tt.saturating_sub(1) {
                        col[t * n + b] += 2.0 * lam[(t + 1) * n + a];
                    }
                }
            }
            Param::K => {
                g += dyn_row(&|t| if t == 0 { 0.0 } else { -u[(t - 1) * nu + b] }, col);
            }
            Param::L => {
                g += dyn_row(&|t| if t == 0 { 0.0 } else { -w[(t - 1) * nw + b] }, col);
            }
            Param::C => {
                for t in 0..tt {
                    let ra = rho[t * ny + a];
                    let xb = xs(t, b);
                    g -= 2.0 * ra * xb;
                    if want_h {
                        col[t * n + b] -= 2.0 * ra;
                        for c in 0..n {
                            col[t * n + c] += 2.0 * pre.ctr.at(c, a) * xb;
                        }
                    }
                }
            }
            Param::D => {
                for t in 0..tt {
                    let ub = u[t * nu + b];
                    g -= 2.0 * rho[t * ny + a] * ub;
                    if want_h {
                        for c in 0..n {
                            col[t * n + c] += 2.0 * pre.ctr.at(c, a) * ub;
                        }
                    }
                }
            }
            Param::SigmaV => {
                let mut sr = vec![0.0; ny * tt];
                for t in 0..tt {
                    let rt = &rho[t * ny..(t + 1) * ny];
                    let st = &mut sr[t * ny..(t + 1) * ny];
                    if a == b {
                        st[a] = rt[a];
                    } else {
                        st[a] = rt[b];
                        st[b] = rt[a];
                    }
                    g -= dot(rt, st);
                    if want_h {
                        pre.ctr.gemv(2.0, st, &mut col[t * n..(t + 1) * n]);
                    }
                }
                s_rho[q] = Some(sr);
            }
            Param::H => {
                for t in 0..tt {
                    let xb = xs(t, b);
                    let fa = cf[t * n + a];
                    g -= 2.0 * xb * fa;
                    if want_h {
                        col[t * n + b] -= 2.0 * fa;
                        for c in 0..n {
                            col[t * n + c] -= 2.0 * pre.e.at(a, c) * xb;
                        }
                        if t + 1 < tt {
                            let xn = xs(t + 1, b);
                            for c in 0..n {
                                col[t * n + c] += 2.0 * pre.f.at(a, c) * xn;
                            }
                        }
                    }
                }
            }
        }
        grad[q] = g;
    }

    let hess = want_h.then(|| {
        // G'N⁻¹G = (L⁻¹G)'(L⁻¹G), with G' held row-wise.
        let mut gt = DMatrix::from_vec(n * tt, k, cols).transpose();
        factor.forward_rows_in_place(&mut gt);
        let gram = &gt * gt.transpose();
        let mut hm = DMatrix::zeros(k, k);
        for q1 in 0..k {
            for q2 in 0..=q1 {
                let v = 0.5 * gram[(q1, q2)]
                    + output_curvature(pre, &dirs[q1], &dirs[q2], &s_rho[q1], &s_rho[q2], &x, u, n, nu, tt);
                hm[(q1, q2)] = v;
                hm[(q2, q1)] = v;
            }
        }
        hm
    });

    BoundEval { value, x: xm, grad, hess }
}

/// `∂²/∂v∂v` of `Σ e' R e` at fixed `x`; nonzero only among `C`, `D`, `Σv`.
#[allow(clippy::too_many_arguments)]
fn output_curvature(
    pre: &Prepared,
    d1: &Direction,
    d2: &Direction,
    sr1: &Option<Vec<f64>>,
    sr2: &Option<Vec<f64>>,
    x: &[f64],
    u: &[f64],
    n: usize,
    nu: usize,
    tt: usize,
) -> f64 {
    let ny = pre.c.r;
    let series = |d: &Direction, t: usize| match d.param {
        Param::C => x[t * n + d.j],
        _ => u[t * nu + d.j],
    };
    let is_lin = |d: &Direction| matches!(d.param, Param::C | Param::D);
    match (is_lin(d1), is_lin(d2), sr1, sr2) {
        (true, true, _, _) => {
            let s: f64 = (0..tt).map(|t| series(d1, t) * series(d2, t)).sum();
            2.0 * pre.r.at(d1.i, d2.i) * s
        }
        (true, false, _, Some(sr)) | (false, true, Some(sr), _) => {
            let lin = if is_lin(d1) { d1 } else { d2 };
            let a = lin.i;
            (0..tt)
                .map(|t| {
                    let st = &sr[t * ny..(t + 1) * ny];
                    let v: f64 = (0..ny).map(|i| st[i] * pre.r.at(i, a)).sum();
                    2.0 * series(lin, t) * v
                })
                .sum()
        }
        (false, false, Some(s1), Some(s2)) => {
            let mut tmp = vec![0.0; ny];
            (0..tt)
                .map(|t| {
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    pre.r.gemv(1.0, &s2[t * ny..(t + 1) * ny], &mut tmp);
                    2.0 * dot(&s1[t * ny..(t + 1) * ny], &tmp)
                })
                .sum()
        }
        _ => 0.0,
    }
}

/// `Ĵ` with derivatives along `dirs`.
pub fn jhat_with_derivatives(
    eta: &ImplicitModel,
    mult: &Multiplier,
    inst: &SimErrorInstance,
    dirs: &[Direction],
    order: Order,
) -> Result<BoundEval> {
    check_instance(eta, mult, inst)?;
    let pre = Prepared::new(eta, &mult.h_mat)?;
    let factor = TridiagFactor::new(eta, &mult.h_mat, &pre.r_dense, inst.horizon())?;
    Ok(evaluate(&pre, mult, inst, &factor, dirs, order))
}

/// `Ĵ(η)` for a fixed multiplier; `Unbounded` if the supremum is infinite.
pub fn jhat_closed_form(eta: &ImplicitModel, mult: &Multiplier, inst: &SimErrorInstance) -> Result<f64> {
    Ok(jhat_with_derivatives(eta, mult, inst, &[], Order::Value)?.value)
}

pub(crate) fn check_instance(eta: &ImplicitModel, mult: &Multiplier, inst: &SimErrorInstance) -> Result<()> {
    let d = eta.dims();
    let t = inst.horizon();
    let ok = inst.u.nrows() == d.nu
        && inst.u.ncols() == t
        && inst.y.nrows() == d.ny
        && inst.x1.len() == d.nx
        && inst.w.nrows() == d.nw
        && inst.w.ncols() >= t.saturating_sub(1)
        && mult.h_mat.shape() == (d.nx, d.nx)
        && mult.h.shape() == (d.nx, t)
        && t >= 1;
    if ok {
        Ok(())
    } else {
        Err(LgssError::DimensionMismatch("instance, multiplier and model shapes disagree".into()))
    }
}

/// States of the implicit model driven by the instance (`E` must be invertible).
pub fn simulate_implicit(eta: &ImplicitModel, inst: &SimErrorInstance) -> Result<DMatrix<f64>> {
    let lu = eta.e.clone().lu();
    if !lu.is_invertible() {
        return Err(LgssError::CertificateViolation("E is singular".into()));
    }
    let t = inst.horizon();
    let mut x = DMatrix::zeros(eta.e.nrows(), t);
    x.set_column(0, &inst.x1);
    for k in 1..t {
        let rhs = &eta.f * x.column(k - 1) + &eta.k * inst.u.column(k - 1) + &eta.l * inst.w.column(k - 1);
        let next = lu.solve(&rhs).ok_or_else(|| LgssError::CertificateViolation("E is singular".into()))?;
        x.set_column(k, &next);
    }
    Ok(x)
}

/// `ℰ = Σ_t |y_t - C x_t - D u_t|²_{Σv⁻¹}` along the simulated states.
pub fn simulation_error(eta: &ImplicitModel, inst: &SimErrorInstance) -> Result<f64> {
    let x = simulate_implicit(eta, inst)?;
    let r = inv_pd(&eta.sigma_v, "Sigma_v")?;
    let e = &inst.y - &eta.c * &x - &eta.d * &inst.u;
    Ok((0..e.ncols()).map(|t| (e.column(t).transpose() * &r * e.column(t))[(0, 0)]).sum())
}

/// Offset `h` making the bound tight at `η`: the maximiser becomes the simulated
/// state sequence, found by the costate recursion
/// `λ_T = E'⁻¹(-C'R e_T)`, `λ_t = E'⁻¹(F'λ_{t+1} - C'R e_t)`, `h_t = λ_t - H x_t`.
pub fn compute_h(eta: &ImplicitModel, h_mat: &DMatrix<f64>, inst: &SimErrorInstance) -> Result<DMatrix<f64>> {
    let x = simulate_implicit(eta, inst)?;
    let r = inv_pd(&eta.sigma_v, "Sigma_v")?;
    let et_lu = eta.e.transpose().lu();
    let ctr = eta.c.transpose() * r;
    let e = &inst.y - &eta.c * &x - &eta.d * &inst.u;
    let t = inst.horizon();
    let nx = eta.e.nrows();
    let mut h = DMatrix::zeros(nx, t);
    let mut lam_next = DVector::zeros(nx);
    for k in (0..t).rev() {
        let rhs = eta.f.transpose() * &lam_next - &ctr * e.column(k);
        let lam = et_lu.solve(&rhs).ok_or_else(|| LgssError::CertificateViolation("E is singular".into()))?;
        h.set_column(k, &(&lam - h_mat * x.column(k)));
        lam_next = lam;
    }
    Ok(h)
}
