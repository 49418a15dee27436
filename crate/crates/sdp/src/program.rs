use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::SdpError;

/// Symmetric matrix stored as upper-triangle triplets `(row, col, value)`, `row <= col`.
///
/// Duplicate positions are summed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseSym {
    pub dim: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseSym {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    /// Adds `value` at `(i, j)` and its mirror; order of the indices does not matter.
    pub fn push(&mut self, i: usize, j: usize, value: f64) {
        let (r, c) = if i <= j { (i, j) } else { (j, i) };
        self.entries.push((r, c, value));
    }

    /// Upper-triangle entries of `m` with magnitude above `drop_tol`.
    pub fn from_dense(m: &DMatrix<f64>, drop_tol: f64) -> Self {
        let n = m.nrows();
        let mut s = Self::new(n);
        for j in 0..n {
            for i in 0..=j {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                if v.abs() > drop_tol {
                    s.entries.push((i, j, v));
                }
            }
        }
        s
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        self.add_to(&mut m, 1.0);
        m
    }

    /// `m += scale * self` (both triangles).
    pub fn add_to(&self, m: &mut DMatrix<f64>, scale: f64) {
        for &(i, j, v) in &self.entries {
            m[(i, j)] += scale * v;
            if i != j {
                m[(j, i)] += scale * v;
            }
        }
    }

    /// `tr(self * x)` for symmetric `x`.
    pub fn dot(&self, x: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| if i == j { v * x[(i, i)] } else { v * (x[(i, j)] + x[(j, i)]) })
            .sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.to_dense().norm()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.2 == 0.0)
    }

    /// Both-triangle expansion with duplicates merged, sorted by (row, col).
    pub(crate) fn full_entries(&self) -> Vec<(usize, usize, f64)> {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(i, j, v) in &self.entries {
            *acc.entry((i, j)).or_insert(0.0) += v;
            if i != j {
                *acc.entry((j, i)).or_insert(0.0) += v;
            }
        }
        acc.into_iter().filter(|(_, v)| *v != 0.0).map(|((i, j), v)| (i, j, v)).collect()
    }
}

/// One constraint `constant + sum_k y_k * coeffs[k] ⪰ 0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LmiBlock {
    pub dim: usize,
    pub constant: SparseSym,
    pub coeffs: BTreeMap<usize, SparseSym>,
}

impl LmiBlock {
    pub fn new(dim: usize) -> Self {
        Self { dim, constant: SparseSym::new(dim), coeffs: BTreeMap::new() }
    }

    pub fn slack(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut z = self.constant.to_dense();
        for (&k, f) in &self.coeffs {
            if y[k] != 0.0 {
                f.add_to(&mut z, y[k]);
            }
        }
        z
    }
}

/// `minimize c'y  s.t.  F_b(y) ⪰ 0 for every block b,  A y = b`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConicProgram {
    pub n_vars: usize,
    pub objective: Vec<f64>,
    pub blocks: Vec<LmiBlock>,
    pub eq_rows: Vec<Vec<(usize, f64)>>,
    pub eq_rhs: Vec<f64>,
}

impl ConicProgram {
    pub fn new(n_vars: usize) -> Self {
        Self { n_vars, objective: vec![0.0; n_vars], ..Default::default() }
    }

    pub fn add_block(&mut self, dim: usize) -> usize {
        self.blocks.push(LmiBlock::new(dim));
        self.blocks.len() - 1
    }

    pub fn add_constant(&mut self, block: usize, i: usize, j: usize, value: f64) {
        self.blocks[block].constant.push(i, j, value);
    }

    pub fn add_coeff(&mut self, block: usize, var: usize, i: usize, j: usize, value: f64) {
        let b = &mut self.blocks[block];
        let dim = b.dim;
        b.coeffs.entry(var).or_insert_with(|| SparseSym::new(dim)).push(i, j, value);
    }

    /// Adds an affine block given as dense constant + dense coefficient list.
    pub fn add_dense_block(
        &mut self,
        constant: &DMatrix<f64>,
        coeffs: &[(usize, DMatrix<f64>)],
    ) -> usize {
        let n = constant.nrows();
        let b = self.add_block(n);
        self.blocks[b].constant = SparseSym::from_dense(constant, 0.0);
        for (var, m) in coeffs {
            let s = SparseSym::from_dense(m, 0.0);
            if !s.entries.is_empty() {
                let blk = &mut self.blocks[b];
                match blk.coeffs.get_mut(var) {
                    Some(existing) => existing.entries.extend(s.entries),
                    None => {
                        blk.coeffs.insert(*var, s);
                    }
                }
            }
        }
        b
    }

    pub fn add_equality(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        let bad = |m: String| Err(SdpError::InvalidProgram(m));
        if self.objective.len() != self.n_vars {
            return bad(format!("objective has {} entries, expected {}", self.objective.len(), self.n_vars));
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return bad("non-finite objective coefficient".into());
        }
        for (bi, b) in self.blocks.iter().enumerate() {
            if b.dim == 0 {
                return bad(format!("block {bi} has dimension 0"));
            }
            let check = |s: &SparseSym, what: &str| -> Result<(), SdpError> {
                if s.dim != b.dim {
                    return Err(SdpError::InvalidProgram(format!("block {bi} {what}: dimension mismatch")));
                }
                for &(i, j, v) in &s.entries {
                    if i > j || j >= b.dim {
                        return Err(SdpError::InvalidProgram(format!(
                            "block {bi} {what}: entry ({i},{j}) outside upper triangle of size {}",
                            b.dim
                        )));
                    }
                    if !v.is_finite() {
                        return Err(SdpError::InvalidProgram(format!("block {bi} {what}: non-finite entry")));
                    }
                }
                Ok(())
            };
            check(&b.constant, "constant")?;
            for (&k, f) in &b.coeffs {
                if k >= self.n_vars {
                    return bad(format!("block {bi} references variable {k} >= {}", self.n_vars));
                }
                check(f, &format!("coefficient of variable {k}"))?;
            }
        }
        if self.eq_rows.len() != self.eq_rhs.len() {
            return bad("equality rows and right-hand sides differ in length".into());
        }
        for (r, row) in self.eq_rows.iter().enumerate() {
            if row.iter().any(|&(k, v)| k >= self.n_vars || !v.is_finite()) || !self.eq_rhs[r].is_finite() {
                return bad(format!("equality row {r} is malformed"));
            }
        }
        Ok(())
    }

    pub fn slack(&self, block: usize, y: &DVector<f64>) -> DMatrix<f64> {
        self.blocks[block].slack(y)
    }

    /// Smallest eigenvalue of every block at `y`.
    pub fn min_eigenvalues(&self, y: &DVector<f64>) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| b.slack(y).symmetric_eigenvalues().min())
            .collect()
    }

    /// Largest PSD violation `max(0, -λ_min)` over blocks.
    pub fn max_violation(&self, y: &DVector<f64>) -> f64 {
        self.min_eigenvalues(y).into_iter().fold(0.0, |acc, l| acc.max(-l))
    }

    pub fn equality_residual(&self, y: &DVector<f64>) -> f64 {
        self.eq_rows
            .iter()
            .zip(&self.eq_rhs)
            .map(|(row, rhs)| (row.iter().map(|&(k, v)| v * y[k]).sum::<f64>() - rhs).abs())
            .fold(0.0, f64::max)
    }

    pub fn objective_value(&self, y: &DVector<f64>) -> f64 {
        self.objective.iter().zip(y.iter()).map(|(c, v)| c * v).sum()
    }
}
