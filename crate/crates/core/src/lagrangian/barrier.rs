//! Log-det barrier Newton method for `min f(v) s.t. G_b(v, p_b) ≻ 0`, where
//! `f` is smooth convex and every LMI block `b` is affine in the shared
//! variables `v` and its own private variables `p_b`. Private variables are
//! eliminated block by block, so the Newton system has the size of `v`.

use nalgebra::{DMatrix, DVector};

use crate::{Exec, LgssError, Result};

use super::bound::Order;

pub(crate) struct LmiTerm {
    pub constant: DMatrix<f64>,
    pub shared: Vec<(usize, DMatrix<f64>)>,
    pub private: Vec<DMatrix<f64>>,
}

impl LmiTerm {
    fn dim(&self) -> usize {
        self.constant.nrows()
    }

    fn value(&self, v: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        let mut z = self.constant.clone();
        for (i, a) in &self.shared {
            z += a * v[*i];
        }
        for (k, b) in self.private.iter().enumerate() {
            z += b * p[k];
        }
        z
    }
}

pub(crate) struct SmoothValue {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// `None` means outside the domain of `f`.
pub(crate) type Objective<'a> = dyn Fn(&DVector<f64>, Order) -> Option<SmoothValue> + Sync + 'a;

#[derive(Debug, Clone, Copy)]
pub(crate) struct BarrierOptions {
    /// Stop once the duality-gap bound `m/t` falls below `rel_tol * max(1, |f|)`.
    pub rel_tol: f64,
    pub growth: f64,
    pub max_newton: usize,
    pub exec: Exec,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-9, growth: 10.0, max_newton: 2000, exec: Exec::default() }
    }
}

pub(crate) struct BarrierResult {
    pub v: DVector<f64>,
    pub p: Vec<DVector<f64>>,
    pub value: f64,
    pub newton_steps: usize,
    pub gap_bound: f64,
    /// Newton steps stopped making progress before the gap target was met;
    /// the point is still strictly feasible.
    pub stalled: bool,
}

struct BlockNewton {
    /// Gradient/Hessian of `-logdet` restricted to the block's variables
    /// (shared first, then private).
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

fn block_newton(term: &LmiTerm, v: &DVector<f64>, p: &DVector<f64>) -> Option<BlockNewton> {
    let z = term.value(v, p);
    let winv = z.cholesky()?.inverse();
    let mats: Vec<&DMatrix<f64>> = term.shared.iter().map(|(_, a)| a).chain(term.private.iter()).collect();
    let wa: Vec<DMatrix<f64>> = mats.iter().map(|a| &winv * *a).collect();
    let k = wa.len();
    let mut grad = DVector::zeros(k);
    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        grad[i] = -wa[i].trace();
        for j in 0..=i {
            let h = wa[i].component_mul(&wa[j].transpose()).sum();
            hess[(i, j)] = h;
            hess[(j, i)] = h;
        }
    }
    Some(BlockNewton { grad, hess })
}

fn block_logdet(term: &LmiTerm, v: &DVector<f64>, p: &DVector<f64>) -> Option<f64> {
    let chol = term.value(v, p).cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Cholesky factor of `D H D` (Jacobi scaling `D`), with a growing ridge if needed.
struct ScaledChol {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    d: DVector<f64>,
}

impl ScaledChol {
    fn new(h: &DMatrix<f64>) -> Option<Self> {
        let n = h.nrows();
        let d: DVector<f64> = h.diagonal().map(|x| if x > 0.0 { 1.0 / x.sqrt() } else { 1.0 });
        let hs = DMatrix::from_fn(n, n, |i, j| h[(i, j)] * d[i] * d[j]);
        let mut ridge = 0.0;
        for _ in 0..12 {
            let mut m = hs.clone();
            for i in 0..n {
                m[(i, i)] += ridge;
            }
            if let Some(chol) = m.cholesky() {
                return Some(Self { chol, d });
            }
            ridge = if ridge == 0.0 { 1e-12 } else { ridge * 100.0 };
        }
        None
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut c in x.column_iter_mut() {
            c.component_mul_assign(&self.d);
        }
        self.chol.solve_mut(&mut x);
        for mut c in x.column_iter_mut() {
            c.component_mul_assign(&self.d);
        }
        x
    }
}

fn robust_solve(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if h.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    let x = ScaledChol::new(h)?.solve(&DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()));
    Some(x.column(0).into_owned())
}

/// Newton-decrement threshold `λ²/2` for ending a centering phase.
const CENTERING_TOL: f64 = 1e-8;
const MIN_USEFUL_STEP: f64 = 1e-6;

pub(crate) fn minimize(
    f: &Objective,
    blocks: &[LmiTerm],
    v0: DVector<f64>,
    p0: Vec<DVector<f64>>,
    opts: &BarrierOptions,
) -> Result<BarrierResult> {
    let nv = v0.len();
    let m: usize = blocks.iter().map(|b| b.dim()).sum();
    let mut v = v0;
    let mut p = p0;
    let infeasible = || LgssError::Solver("barrier start point is not strictly feasible".into());
    let barrier = |v: &DVector<f64>, p: &[DVector<f64>]| -> Option<f64> {
        let lds = opts.exec.map_range(blocks.len(), |b| block_logdet(&blocks[b], v, &p[b]));
        lds.into_iter().try_fold(0.0, |acc, l| l.map(|l| acc - l))
    };
    barrier(&v, &p).ok_or_else(infeasible)?;
    let f0 = f(&v, Order::Value).ok_or_else(infeasible)?.value;
    let mut t = if m == 0 { 1.0 } else { m as f64 / (0.01 * f0.abs().max(1.0)) };
    let mut steps = 0;
    let mut fv = f0;

    let mut stalled = false;
    loop {
        // Centering.
        for _ in 0..100 {
            if steps >= opts.max_newton {
                return Err(LgssError::Solver(format!("barrier method hit {steps} Newton steps")));
            }
            steps += 1;
            let sv = f(&v, Order::Hessian).ok_or_else(|| LgssError::Numerical("objective left its domain".into()))?;
            let bn: Vec<BlockNewton> = opts
                .exec
                .map_range(blocks.len(), |b| block_newton(&blocks[b], &v, &p[b]))
                .into_iter()
                .collect::<Option<_>>()
                .ok_or_else(|| LgssError::Numerical("barrier iterate lost feasibility".into()))?;
            // Private elimination and the reduced solve may break down once the
            // iterate is extremely close to the boundary; stop there.
            let Some(step) = newton_direction(blocks, &bn, sv.hess * t, sv.grad * t, nv) else {
                stalled = true;
                break;
            };
            let (dv, dp, slope) = step;
            let dec = -slope;
            if !(dec > 0.0) || dec / 2.0 < CENTERING_TOL {
                break;
            }
            let phi0 = t * sv.value + barrier(&v, &p).ok_or_else(infeasible)?;
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-12 {
                let vn = &v + &dv * alpha;
                let pn: Vec<DVector<f64>> = p.iter().zip(&dp).map(|(p, d)| p + d * alpha).collect();
                if let Some(bar) = barrier(&vn, &pn) {
                    if let Some(fnew) = f(&vn, Order::Value) {
                        let phi = t * fnew.value + bar;
                        if phi <= phi0 + 0.25 * alpha * slope {
                            v = vn;
                            p = pn;
                            fv = fnew.value;
                            accepted = true;
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Rounding dominates the merit function: no further progress.
                stalled = true;
                break;
            }
            if alpha < MIN_USEFUL_STEP {
                // Centred as well as rounding allows at this `t`.
                break;
            }
        }
        let gap = m as f64 / t;
        if stalled || gap < opts.rel_tol * fv.abs().max(1.0) || m == 0 {
            return Ok(BarrierResult { v, p, value: fv, newton_steps: steps, gap_bound: gap, stalled });
        }
        t *= opts.growth;
    }
}

type Step = (DVector<f64>, Vec<DVector<f64>>, f64);

/// Newton direction with private variables eliminated block by block;
/// returns `(Δv, Δp, g'Δ)`.
fn newton_direction(
    blocks: &[LmiTerm],
    bn: &[BlockNewton],
    mut hvv: DMatrix<f64>,
    mut gv: DVector<f64>,
    nv: usize,
) -> Option<Step> {
    let mut reduced_h = DMatrix::zeros(nv, nv);
    let mut reduced_g = DVector::zeros(nv);
    let mut elim = Vec::with_capacity(blocks.len());
    for (term, b) in blocks.iter().zip(bn) {
        let ns = term.shared.len();
        let np = term.private.len();
        for (a, (ia, _)) in term.shared.iter().enumerate() {
            gv[*ia] += b.grad[a];
            for (c, (ic, _)) in term.shared.iter().enumerate() {
                hvv[(*ia, *ic)] += b.hess[(a, c)];
            }
        }
        if np == 0 {
            elim.push(None);
            continue;
        }
        let hpp = b.hess.view((ns, ns), (np, np)).into_owned();
        let hps = b.hess.view((ns, 0), (np, ns)).into_owned();
        let gp = b.grad.rows(ns, np).into_owned();
        let chol = ScaledChol::new(&hpp)?;
        let x_ps = chol.solve(&hps);
        let x_gp = chol.solve(&DMatrix::from_column_slice(np, 1, gp.as_slice())).column(0).into_owned();
        let corr_h = hps.transpose() * &x_ps;
        let corr_g = hps.transpose() * &x_gp;
        for (a, (ia, _)) in term.shared.iter().enumerate() {
            reduced_g[*ia] += corr_g[a];
            for (c, (ic, _)) in term.shared.iter().enumerate() {
                reduced_h[(*ia, *ic)] += corr_h[(a, c)];
            }
        }
        elim.push(Some((x_ps, x_gp)));
    }
    let dv = robust_solve(&(&hvv - &reduced_h), &-(&gv - &reduced_g))?;
    let dp: Vec<DVector<f64>> = blocks
        .iter()
        .zip(&elim)
        .map(|(term, e)| match e {
            None => DVector::zeros(0),
            Some((x_ps, x_gp)) => {
                let dvs = DVector::from_iterator(term.shared.len(), term.shared.iter().map(|(i, _)| dv[*i]));
                -(x_gp + x_ps * dvs)
            }
        })
        .collect();
    let mut slope = gv.dot(&dv);
    for (b, (term, d)) in bn.iter().zip(blocks.iter().zip(&dp)) {
        if !d.is_empty() {
            slope += b.grad.rows(term.shared.len(), d.len()).dot(d);
        }
    }
    slope.is_finite().then_some((dv, dp, slope))
}
