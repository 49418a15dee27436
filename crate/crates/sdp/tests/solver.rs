use lgss_sdp::reference::{penalty_feasibility, ReferenceOptions};
use lgss_sdp::{solve, triplet, ConicProgram, Exec, SolveOptions, SolveStatus};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn opts() -> SolveOptions {
    SolveOptions::default()
}

/// minimize t  s.t.  tI - A ⪰ 0   ->  t* = λ_max(A)
#[test]
fn largest_eigenvalue_as_sdp() {
    let a = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.3, -1.0, 1.0, 0.5, 0.3, 0.5, -0.7]);
    let mut p = ConicProgram::new(1);
    p.objective[0] = 1.0;
    let b = p.add_block(3);
    for i in 0..3 {
        p.add_coeff(b, 0, i, i, 1.0);
        for j in i..3 {
            p.add_constant(b, i, j, -a[(i, j)]);
        }
    }
    let r = solve(&p, &opts()).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal, "{}", r.message);
    let lmax = a.symmetric_eigenvalues().max();
    assert!((r.y[0] - lmax).abs() < 1e-7, "{} vs {}", r.y[0], lmax);
    assert!(r.max_violation <= 1e-6);
}

/// minimize y1 + y2  s.t.  [[y1, 1], [1, y2]] ⪰ 0, optionally y1 = 2 y2.
#[test]
fn two_by_two_with_and_without_equality() {
    let mut p = ConicProgram::new(2);
    p.objective = vec![1.0, 1.0];
    let b = p.add_block(2);
    p.add_coeff(b, 0, 0, 0, 1.0);
    p.add_coeff(b, 1, 1, 1, 1.0);
    p.add_constant(b, 0, 1, 1.0);
    let r = solve(&p, &opts()).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal);
    assert!((r.objective - 2.0).abs() < 1e-7);

    p.add_equality(vec![(0, 1.0), (1, -2.0)], 0.0);
    let r = solve(&p, &opts()).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal, "{}", r.message);
    assert!((r.objective - 3.0 / 2f64.sqrt()).abs() < 1e-7, "{}", r.objective);
    assert!(r.equality_residual < 1e-9);
}

/// Linear program on diagonal blocks: min -y1 - y2  s.t. y ≥ 0, y1 + 2y2 ≤ 4, 3y1 + y2 ≤ 6.
#[test]
fn diagonal_blocks_reproduce_linear_program() {
    let mut p = ConicProgram::new(2);
    p.objective = vec![-1.0, -1.0];
    let b = p.add_block(4);
    p.add_coeff(b, 0, 0, 0, 1.0);
    p.add_coeff(b, 1, 1, 1, 1.0);
    p.add_constant(b, 2, 2, 4.0);
    p.add_coeff(b, 0, 2, 2, -1.0);
    p.add_coeff(b, 1, 2, 2, -2.0);
    p.add_constant(b, 3, 3, 6.0);
    p.add_coeff(b, 0, 3, 3, -3.0);
    p.add_coeff(b, 1, 3, 3, -1.0);
    let r = solve(&p, &opts()).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal);
    // vertex (8/5, 6/5)
    assert!((r.y[0] - 1.6).abs() < 1e-6 && (r.y[1] - 1.2).abs() < 1e-6, "{:?}", r.y);
}

#[test]
fn infeasible_program_is_reported() {
    // y - 1 ⪰ 0 and -y ⪰ 0
    let mut p = ConicProgram::new(1);
    let b0 = p.add_block(1);
    p.add_constant(b0, 0, 0, -1.0);
    p.add_coeff(b0, 0, 0, 0, 1.0);
    let b1 = p.add_block(1);
    p.add_coeff(b1, 0, 0, 0, -1.0);
    let r = solve(&p, &opts()).unwrap();
    assert_eq!(r.status, SolveStatus::Infeasible, "{}", r.message);
}

#[test]
fn inconsistent_equalities_are_infeasible() {
    let mut p = ConicProgram::new(1);
    let b = p.add_block(1);
    p.add_coeff(b, 0, 0, 0, 1.0);
    p.add_equality(vec![(0, 1.0)], 1.0);
    p.add_equality(vec![(0, 1.0)], 2.0);
    assert_eq!(solve(&p, &opts()).unwrap().status, SolveStatus::Infeasible);
}

#[test]
fn sequential_and_parallel_agree() {
    let p = random_bounded_program(7, 3, &[3, 4, 2]);
    let a = solve(&p, &SolveOptions { exec: Exec::Sequential, ..opts() }).unwrap();
    let b = solve(&p, &SolveOptions { exec: Exec::Parallel, ..opts() }).unwrap();
    assert_eq!(a.y, b.y);
}

/// Deterministic pseudo-random program that is strictly feasible (y = ȳ gives
/// identity slack) and bounded (c = A*(X0) for some X0 ≻ 0).
fn random_bounded_program(seed: u64, n: usize, dims: &[usize]) -> ConicProgram {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let mut p = ConicProgram::new(n);
    let ybar: Vec<f64> = (0..n).map(|_| next()).collect();
    let mut c = vec![0.0; n];
    for &d in dims {
        let coeffs: Vec<DMatrix<f64>> = (0..n)
            .map(|_| {
                let m = DMatrix::from_fn(d, d, |_, _| next());
                (&m + m.transpose()) * 0.5
            })
            .collect();
        let mut f0 = DMatrix::identity(d, d);
        for (k, f) in coeffs.iter().enumerate() {
            f0 -= f * ybar[k];
        }
        let g = DMatrix::from_fn(d, d, |_, _| next());
        let x0 = &g * g.transpose() + DMatrix::identity(d, d);
        for (k, f) in coeffs.iter().enumerate() {
            c[k] += (f * &x0).trace();
        }
        let list: Vec<(usize, DMatrix<f64>)> = coeffs.into_iter().enumerate().collect();
        p.add_dense_block(&f0, &list);
    }
    p.objective = c;
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn optimal_solutions_satisfy_lmis(seed in 0u64..10_000, n in 1usize..5) {
        let p = random_bounded_program(seed, n, &[2, 3]);
        let r = solve(&p, &opts()).unwrap();
        prop_assert!(r.status.is_solved(), "status {:?}: {}", r.status, r.message);
        prop_assert!(r.max_violation <= 1e-6);
        // weak duality: objective close to the dual bound
        prop_assert!((r.objective - r.dual_objective).abs() <= 1e-5 * (1.0 + r.objective.abs()));
    }

    #[test]
    fn triplet_roundtrip_is_lossless(seed in 0u64..10_000, n in 1usize..4) {
        let mut p = random_bounded_program(seed, n, &[2, 1]);
        p.add_equality(vec![(0, 1.5)], 0.25);
        let text = triplet::to_string(&p);
        let q = triplet::from_str(&text).unwrap();
        prop_assert_eq!(q.n_vars, p.n_vars);
        prop_assert_eq!(&q.objective, &p.objective);
        prop_assert_eq!(q.blocks.len(), p.blocks.len());
        for (a, b) in p.blocks.iter().zip(&q.blocks) {
            prop_assert_eq!(a.constant.to_dense(), b.constant.to_dense());
            prop_assert_eq!(a.coeffs.len(), b.coeffs.len());
            for (k, f) in &a.coeffs {
                prop_assert_eq!(f.to_dense(), b.coeffs[k].to_dense());
            }
        }
        prop_assert_eq!(&q.eq_rows, &p.eq_rows);
        prop_assert_eq!(&q.eq_rhs, &p.eq_rhs);
    }

    /// IPM feasibility (optimal vs infeasible) agrees with the penalty reference.
    #[test]
    fn reference_agrees_on_feasibility(shift in -2.0f64..2.0) {
        // y ⪰ shift·I-ish box problem: [[y, 0],[0, 1 - y]] - shift·e1e1' ⪰ 0
        // feasible iff shift <= 1 (y in [shift, 1]).
        let mut p = ConicProgram::new(1);
        let b = p.add_block(2);
        p.add_coeff(b, 0, 0, 0, 1.0);
        p.add_constant(b, 0, 0, -shift);
        p.add_constant(b, 1, 1, 1.0);
        p.add_coeff(b, 0, 1, 1, -1.0);
        prop_assume!((shift - 1.0).abs() > 1e-3);
        let r = solve(&p, &opts()).unwrap();
        let reference = penalty_feasibility(&p, &ReferenceOptions { margin: 0.0, ..Default::default() }).unwrap();
        let ipm_feasible = r.status.is_solved();
        prop_assert_eq!(ipm_feasible, shift < 1.0);
        prop_assert_eq!(reference.feasible, shift < 1.0);
        let _ = DVector::<f64>::zeros(1);
    }
}
