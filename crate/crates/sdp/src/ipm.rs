use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::{ConicProgram, Exec, SdpError, SparseSym};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Stalled, but residuals and gap are within `near_tol`.
    NearOptimal,
    /// A dual ray certifies that the LMIs (plus equalities) have no solution.
    Infeasible,
    Unbounded,
    Failure,
}

impl SolveStatus {
    pub fn is_solved(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::NearOptimal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::NearOptimal => "near_optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::Failure => "failure",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub near_tol: f64,
    pub max_iters: usize,
    pub exec: Exec,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-9, near_tol: 1e-6, max_iters: 200, exec: Exec::default() }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub y: DVector<f64>,
    /// Dual matrices, one per block (for the equality-reduced program).
    pub dual: Vec<DMatrix<f64>>,
    pub objective: f64,
    pub dual_objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub rel_gap: f64,
    pub max_violation: f64,
    pub equality_residual: f64,
    pub iterations: usize,
    pub wall_time: Duration,
    pub message: String,
}

struct WBlock {
    dim: usize,
    f0: DMatrix<f64>,
    /// Local variable -> reduced variable index.
    vars: Vec<usize>,
    /// Full (both triangle) entries per local variable.
    mats: Vec<Vec<(usize, usize, f64)>>,
    rows: Vec<Vec<usize>>,
}

struct Work {
    n: usize,
    c: DVector<f64>,
    blocks: Vec<WBlock>,
}

/// Affine reparametrisation `y = y0 + N diag(1/d) z` produced by presolve.
struct Presolved {
    work: Work,
    y0: DVector<f64>,
    basis: DMatrix<f64>,
    obj_offset: f64,
}

fn presolve(p: &ConicProgram) -> Result<Result<Presolved, (SolveStatus, String)>, SdpError> {
    p.validate()?;
    let n = p.n_vars;
    let c = DVector::from_column_slice(&p.objective);

    // Equality elimination through an SVD nullspace.
    let (y0, nullspace) = if p.eq_rows.is_empty() {
        (DVector::zeros(n), DMatrix::identity(n, n))
    } else {
        let m = p.eq_rows.len();
        let mut a = DMatrix::<f64>::zeros(m, n);
        for (r, row) in p.eq_rows.iter().enumerate() {
            for &(k, v) in row {
                a[(r, k)] += v;
            }
        }
        let b = DVector::from_column_slice(&p.eq_rhs);
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let tol = 1e-12 * smax.max(1.0) * (m.max(n) as f64);
        let y0 = svd.solve(&b, tol).map_err(|e| SdpError::InvalidProgram(e.to_string()))?;
        if (&a * &y0 - &b).norm() > 1e-8 * (1.0 + b.norm()) {
            return Ok(Err((SolveStatus::Infeasible, "inconsistent equality constraints".into())));
        }
        // Nullspace from the eigenvectors of A'A with (numerically) zero eigenvalue.
        let eig = (a.transpose() * &a).symmetric_eigen();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
        let null_dim = n - rank;
        let mut basis = DMatrix::zeros(n, null_dim);
        for (k, &i) in idx.iter().take(null_dim).enumerate() {
            basis.set_column(k, &eig.eigenvectors.column(i));
        }
        (y0, basis)
    };

    let nz = nullspace.ncols();
    let obj_offset = c.dot(&y0);
    let cz = nullspace.transpose() * &c;

    // Transformed blocks.
    let identity_map = p.eq_rows.is_empty();
    let mut blocks_sparse: Vec<(usize, DMatrix<f64>, Vec<(usize, SparseSym)>)> = Vec::new();
    for b in &p.blocks {
        let mut f0 = b.constant.to_dense();
        if !identity_map {
            for (&k, f) in &b.coeffs {
                if y0[k] != 0.0 {
                    f.add_to(&mut f0, y0[k]);
                }
            }
        }
        let coeffs: Vec<(usize, SparseSym)> = if identity_map {
            b.coeffs.iter().map(|(&k, f)| (k, f.clone())).collect()
        } else {
            let dense: Vec<(usize, DMatrix<f64>)> = b.coeffs.iter().map(|(&k, f)| (k, f.to_dense())).collect();
            let mut out = Vec::new();
            for j in 0..nz {
                let mut acc = DMatrix::zeros(b.dim, b.dim);
                let mut any = false;
                for (k, f) in &dense {
                    let w = nullspace[(*k, j)];
                    if w != 0.0 {
                        acc += f * w;
                        any = true;
                    }
                }
                if any {
                    let scale = acc.amax();
                    let s = SparseSym::from_dense(&acc, 1e-13 * scale);
                    if !s.entries.is_empty() {
                        out.push((j, s));
                    }
                }
            }
            out
        };
        blocks_sparse.push((b.dim, f0, coeffs));
    }

    // Column scaling; variables that appear nowhere are fixed at zero.
    let mut norm2 = vec![0.0; nz];
    for (_, _, coeffs) in &blocks_sparse {
        for (k, s) in coeffs {
            let f = s.frobenius_norm();
            norm2[*k] += f * f;
        }
    }
    let mut active = Vec::new();
    let mut index = vec![usize::MAX; nz];
    for k in 0..nz {
        if norm2[k] > 0.0 {
            index[k] = active.len();
            active.push(k);
        } else if cz[k].abs() > 1e-14 * (1.0 + cz.amax()) {
            return Ok(Err((SolveStatus::Unbounded, format!("variable {k} is free with nonzero cost"))));
        }
    }
    let d: Vec<f64> = active.iter().map(|&k| norm2[k].sqrt()).collect();
    let mut basis = DMatrix::zeros(n, active.len());
    for (a, &k) in active.iter().enumerate() {
        basis.set_column(a, &(nullspace.column(k) / d[a]));
    }
    let cw = DVector::from_iterator(active.len(), active.iter().enumerate().map(|(a, &k)| cz[k] / d[a]));

    let blocks = blocks_sparse
        .into_iter()
        .map(|(dim, f0, coeffs)| {
            let mut vars = Vec::new();
            let mut mats = Vec::new();
            let mut rows = Vec::new();
            for (k, s) in coeffs {
                let a = index[k];
                let scaled: Vec<(usize, usize, f64)> =
                    s.full_entries().into_iter().map(|(i, j, v)| (i, j, v / d[a])).collect();
                let mut r: Vec<usize> = scaled.iter().map(|e| e.0).collect();
                r.dedup();
                vars.push(a);
                mats.push(scaled);
                rows.push(r);
            }
            WBlock { dim, f0, vars, mats, rows }
        })
        .collect();

    Ok(Ok(Presolved {
        work: Work { n: active.len(), c: cw, blocks },
        y0,
        basis,
        obj_offset,
    }))
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn full_dot(entries: &[(usize, usize, f64)], x: &DMatrix<f64>) -> f64 {
    entries.iter().map(|&(i, j, v)| v * x[(j, i)]).sum()
}

impl WBlock {
    fn apply(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (l, mat) in self.mats.iter().enumerate() {
            let v = y[self.vars[l]];
            if v != 0.0 {
                for &(i, j, f) in mat {
                    m[(i, j)] += v * f;
                }
            }
        }
        m
    }

    fn adjoint_into(&self, x: &DMatrix<f64>, out: &mut DVector<f64>) {
        for (l, mat) in self.mats.iter().enumerate() {
            out[self.vars[l]] += full_dot(mat, x);
        }
    }

    /// Local Schur block `tr(F_i X F_j Z^{-1})`.
    fn schur(&self, x: &DMatrix<f64>, zi: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.vars.len();
        let n = self.dim;
        let mut out = DMatrix::zeros(m, m);
        for j in 0..m {
            let rows = &self.rows[j];
            // P = F_j[rows, :] * Zi
            let mut p = DMatrix::<f64>::zeros(rows.len(), n);
            let mut ri = 0;
            for &(r, q, v) in &self.mats[j] {
                while rows[ri] != r {
                    ri += 1;
                }
                for col in 0..n {
                    p[(ri, col)] += v * zi[(q, col)];
                }
            }
            // G = X[:, rows] * P
            let mut g = DMatrix::<f64>::zeros(n, n);
            for (k, &r) in rows.iter().enumerate() {
                for col in 0..n {
                    let pv = p[(k, col)];
                    if pv != 0.0 {
                        for row in 0..n {
                            g[(row, col)] += x[(row, r)] * pv;
                        }
                    }
                }
            }
            for i in 0..m {
                out[(i, j)] = full_dot(&self.mats[i], &g);
            }
        }
        sym(&out)
    }
}

fn max_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    let Some(ch) = x.clone().cholesky() else { return 0.0 };
    let l = ch.l();
    let tmp = l.solve_lower_triangular(dx).unwrap_or_else(|| dx.clone());
    let m = l.solve_lower_triangular(&tmp.transpose()).unwrap_or(tmp);
    let lmin = sym(&m).symmetric_eigenvalues().min();
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn inverse_pd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| sym(&c.inverse()))
}

struct State {
    x: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    y: DVector<f64>,
}

struct Measures {
    pobj: f64,
    dobj: f64,
    gap_rel: f64,
    pinf: f64,
    dinf: f64,
}

impl Work {
    fn adjoint(&self, xs: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (b, x) in self.blocks.iter().zip(xs) {
            b.adjoint_into(x, &mut out);
        }
        out
    }

    fn measures(&self, s: &State, rp: &[DMatrix<f64>]) -> Measures {
        let pobj = self.c.dot(&s.y);
        let dobj: f64 = -self.blocks.iter().zip(&s.x).map(|(b, x)| b.f0.dot(x)).sum::<f64>();
        let gap: f64 = s.x.iter().zip(&s.z).map(|(x, z)| x.dot(z)).sum();
        let f0n: f64 = self.blocks.iter().map(|b| b.f0.norm_squared()).sum::<f64>().sqrt();
        let rpn: f64 = rp.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt();
        let rd = &self.c - self.adjoint(&s.x);
        Measures {
            pobj,
            dobj,
            gap_rel: gap.abs() / (1.0 + pobj.abs() + dobj.abs()),
            pinf: rpn / (1.0 + f0n),
            dinf: rd.norm() / (1.0 + self.c.norm()),
        }
    }
}

/// Solves `minimize c'y s.t. F_b(y) ⪰ 0, Ay = b` with an infeasible-start
/// primal-dual path-following method (HKM direction, Mehrotra corrector).
pub fn solve(p: &ConicProgram, opts: &SolveOptions) -> Result<SolveResult, SdpError> {
    let start = Instant::now();
    let pre = match presolve(p)? {
        Ok(pre) => pre,
        Err((status, message)) => {
            let y = DVector::zeros(p.n_vars);
            return Ok(SolveResult {
                status,
                max_violation: p.max_violation(&y),
                equality_residual: p.equality_residual(&y),
                objective: f64::NAN,
                dual_objective: f64::NAN,
                primal_residual: f64::NAN,
                dual_residual: f64::NAN,
                rel_gap: f64::NAN,
                y,
                dual: Vec::new(),
                iterations: 0,
                wall_time: start.elapsed(),
                message,
            });
        }
    };
    let w = &pre.work;
    let exec = opts.exec;

    let mut s = State {
        x: Vec::with_capacity(w.blocks.len()),
        z: Vec::with_capacity(w.blocks.len()),
        y: DVector::zeros(w.n),
    };
    let cmax = w.c.amax();
    for b in &w.blocks {
        let nb = (b.dim as f64).sqrt();
        let xi = (10.0f64).max(nb).max(nb * (1.0 + cmax));
        let zeta = (10.0f64).max(nb).max(b.f0.norm());
        s.x.push(DMatrix::identity(b.dim, b.dim) * xi);
        s.z.push(DMatrix::identity(b.dim, b.dim) * zeta);
    }
    let ntot: usize = w.blocks.iter().map(|b| b.dim).sum();

    let mut status = SolveStatus::Failure;
    let mut message = String::from("iteration limit reached");
    let mut iterations = 0;
    let mut stall = 0;
    let mut best: Option<(f64, DVector<f64>, Vec<DMatrix<f64>>)> = None;

    for iter in 0..opts.max_iters {
        iterations = iter;
        let rp: Vec<DMatrix<f64>> = exec.map(&w.blocks, |b, blk| {
            let mut r = &blk.f0 + blk.apply(&s.y) - &s.z[b];
            r = sym(&r);
            r
        });
        let m = w.measures(&s, &rp);
        let merit = m.gap_rel.max(m.pinf).max(m.dinf);
        if best.as_ref().map_or(true, |b| merit < b.0) {
            best = Some((merit, s.y.clone(), s.x.clone()));
        }
        if merit < opts.tol {
            status = SolveStatus::Optimal;
            message = "converged".into();
            break;
        }
        if m.dobj > 0.0 {
            let ax = w.adjoint(&s.x);
            if ax.amax() / m.dobj < 1e-9 && m.dobj > 1e6 {
                status = SolveStatus::Infeasible;
                message = format!("dual ray found (dual objective {:.3e})", m.dobj);
                break;
            }
        }
        if m.pobj < -1e12 && m.pinf < 1e-6 {
            status = SolveStatus::Unbounded;
            message = "primal objective diverges".into();
            break;
        }

        let zi: Vec<DMatrix<f64>> = match exec
            .map(&s.z, |_, z| inverse_pd(z))
            .into_iter()
            .collect::<Option<Vec<_>>>()
        {
            Some(v) => v,
            None => {
                message = "slack lost definiteness".into();
                break;
            }
        };
        let locals: Vec<DMatrix<f64>> = exec.map(&w.blocks, |b, blk| blk.schur(&s.x[b], &zi[b]));
        let mut schur = DMatrix::<f64>::zeros(w.n, w.n);
        for (blk, loc) in w.blocks.iter().zip(&locals) {
            for (li, &gi) in blk.vars.iter().enumerate() {
                for (lj, &gj) in blk.vars.iter().enumerate() {
                    schur[(gi, gj)] += loc[(li, lj)];
                }
            }
        }
        let dmax = schur.diagonal().amax().max(1e-300);
        let chol = schur.clone().cholesky().or_else(|| {
            let mut reg = schur.clone();
            for i in 0..w.n {
                reg[(i, i)] += 1e-13 * dmax;
            }
            reg.cholesky()
        });
        let solve_schur = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
            match &chol {
                Some(c) => Some(c.solve(rhs)),
                None => schur.clone().lu().solve(rhs),
            }
        };

        let mu = s.x.iter().zip(&s.z).map(|(x, z)| x.dot(z)).sum::<f64>() / ntot as f64;

        // Predictor.
        let wpred: Vec<DMatrix<f64>> =
            exec.map(&w.blocks, |b, _| -(&s.x[b] * &rp[b] * &zi[b]));
        let rhs = -&w.c + w.adjoint(&wpred);
        let Some(dy_a) = solve_schur(&rhs) else {
            message = "singular Schur complement".into();
            break;
        };
        let dz_a: Vec<DMatrix<f64>> = exec.map(&w.blocks, |b, blk| &rp[b] + blk.apply(&dy_a));
        let dx_a: Vec<DMatrix<f64>> =
            exec.map(&w.blocks, |b, _| sym(&(-&s.x[b] - &s.x[b] * &dz_a[b] * &zi[b])));
        let ap = (0..w.blocks.len()).map(|b| max_step(&s.x[b], &dx_a[b])).fold(1.0f64, f64::min);
        let ad = (0..w.blocks.len()).map(|b| max_step(&s.z[b], &dz_a[b])).fold(1.0f64, f64::min);
        let mu_a = (0..w.blocks.len())
            .map(|b| (&s.x[b] + &dx_a[b] * ap).dot(&(&s.z[b] + &dz_a[b] * ad)))
            .sum::<f64>()
            / ntot as f64;
        let sigma = (mu_a / mu).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let wcorr: Vec<DMatrix<f64>> = exec.map(&w.blocks, |b, _| {
            &zi[b] * (sigma * mu) - &s.x[b] * &rp[b] * &zi[b] - &dx_a[b] * &dz_a[b] * &zi[b]
        });
        let rhs = -&w.c + w.adjoint(&wcorr);
        let Some(dy) = solve_schur(&rhs) else {
            message = "singular Schur complement".into();
            break;
        };
        let dz: Vec<DMatrix<f64>> = exec.map(&w.blocks, |b, blk| &rp[b] + blk.apply(&dy));
        let dx: Vec<DMatrix<f64>> = exec.map(&w.blocks, |b, _| {
            sym(&(&zi[b] * (sigma * mu)
                - &s.x[b]
                - &s.x[b] * &dz[b] * &zi[b]
                - &dx_a[b] * &dz_a[b] * &zi[b]))
        });
        let tau = if merit < 1e-5 { 0.99 } else { 0.95 };
        let ap = (0..w.blocks.len()).map(|b| max_step(&s.x[b], &dx[b])).fold(f64::INFINITY, f64::min);
        let ad = (0..w.blocks.len()).map(|b| max_step(&s.z[b], &dz[b])).fold(f64::INFINITY, f64::min);
        let ap = (tau * ap).min(1.0);
        let ad = (tau * ad).min(1.0);
        if ap < 1e-10 && ad < 1e-10 {
            stall += 1;
            if stall > 3 {
                message = "step length collapsed".into();
                break;
            }
        } else {
            stall = 0;
        }
        for b in 0..w.blocks.len() {
            s.x[b] = sym(&(&s.x[b] + &dx[b] * ap));
            s.z[b] = sym(&(&s.z[b] + &dz[b] * ad));
        }
        s.y += &dy * ad;
        iterations = iter + 1;
    }

    if status == SolveStatus::Failure {
        if let Some((merit, y, x)) = best {
            if merit < opts.near_tol {
                status = SolveStatus::NearOptimal;
                s.y = y;
                s.x = x;
            }
        }
    }

    let rp: Vec<DMatrix<f64>> = w
        .blocks
        .iter()
        .enumerate()
        .map(|(b, blk)| &blk.f0 + blk.apply(&s.y) - &s.z[b])
        .collect();
    let m = w.measures(&s, &rp);
    let y = &pre.y0 + &pre.basis * &s.y;
    Ok(SolveResult {
        status,
        objective: p.objective_value(&y),
        dual_objective: m.dobj + pre.obj_offset,
        primal_residual: m.pinf,
        dual_residual: m.dinf,
        rel_gap: m.gap_rel,
        max_violation: p.max_violation(&y),
        equality_residual: p.equality_residual(&y),
        y,
        dual: s.x,
        iterations,
        wall_time: start.elapsed(),
        message,
    })
}
