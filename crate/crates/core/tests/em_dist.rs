mod common;

use lgss_core::em_dist::{
    em_dist_run, estep, mstep_alpha, mstep_beta, q1, q2, q3_direct, q3_instances, q_eval, rank_one_decompose,
};
use lgss_core::history::EmOptions;
use lgss_core::inference::{lifted_conditioning_oracle, log_likelihood};
use lgss_core::lagrangian::MStepOptions;
use lgss_core::model::ExplicitModel;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_iterator(r, c, (0..r * c).map(|_| StandardNormal.sample(&mut *rng)))
}

/// A nearby model: every block perturbed, covariances kept PD.
fn perturb(m: &ExplicitModel, scale: f64, seed: u64) -> ExplicitModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = |x: &DMatrix<f64>| x + randn(&mut rng, x.nrows(), x.ncols()) * scale;
    let spd = |x: DMatrix<f64>| {
        let s = (&x + x.transpose()) * 0.5;
        let n = s.nrows();
        let shift = (1e-3 - s.symmetric_eigenvalues().min()).max(0.0);
        s + DMatrix::identity(n, n) * shift
    };
    ExplicitModel {
        mu: &m.mu + randn(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), m.mu.len(), 1).column(0) * scale,
        sigma1: spd(p(&m.sigma1)),
        sigma_w: spd(p(&m.sigma_w)),
        sigma_v: spd(p(&m.sigma_v)),
        a: p(&m.a),
        b: p(&m.b),
        g: p(&m.g),
        c: p(&m.c),
        d: p(&m.d),
    }
}

#[test]
fn disturbance_second_moment_matches_lifted_oracle() {
    let m = common::random_model(2, 1, false, 3);
    let tr = common::data(&m, 15, 4);
    let b = estep(&m, &tr.u, &tr.y).unwrap();
    let o = lifted_conditioning_oracle(&m, &tr.u, &tr.y).unwrap();
    let want = o.w_second_moments.iter().sum::<DMatrix<f64>>() / 15.0;
    assert!((&b.sigma_w_hat - &want).amax() < 1e-8);
    assert_eq!(mstep_beta(&b), b.sigma_w_hat);
}

#[test]
fn uninformative_outputs_return_the_prior() {
    let mut m = common::random_model(2, 2, false, 5);
    m.c.fill(0.0);
    m.d.fill(0.0);
    m.mu = DVector::from_vec(vec![0.3, -0.7]);
    let tr = common::data(&m, 12, 6);
    let b = estep(&m, &tr.u, &tr.y).unwrap();
    assert!((&b.sigma_w_hat - &m.sigma_w).amax() < 1e-10);
    let (mu, s1) = mstep_alpha(&b);
    assert!((&mu - &m.mu).amax() < 1e-12);
    assert!((&s1 - &m.sigma1).amax() < 1e-12);
}

#[test]
fn point_mass_posterior_has_a_single_instance() {
    let mut m = common::random_model(2, 1, false, 7);
    m.sigma_w.fill(0.0);
    m.sigma1.fill(0.0);
    m.mu = DVector::from_vec(vec![1.0, 2.0]);
    let tr = common::data(&m, 10, 8);
    let b = estep(&m, &tr.u, &tr.y).unwrap();
    assert!(b.rank_one_terms.is_empty());
    assert_eq!(b.instances.len(), 1);
    assert!((&b.instances[0].x1 - &m.mu).amax() < 1e-12);
    assert!(b.instances[0].w.amax() < 1e-12);
}

#[test]
fn low_rank_matrix_splits_into_its_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = randn(&mut rng, 10, 4);
    let omega = &f * f.transpose();
    let terms = rank_one_decompose(&omega).unwrap();
    assert_eq!(terms.len(), 4);
    let rebuilt: DMatrix<f64> = terms.iter().map(|w| w * w.transpose()).sum();
    assert!((&omega - rebuilt).norm() <= 1e-10 * omega.norm().max(1.0));
}

#[test]
fn output_term_agrees_between_lifted_and_instance_forms() {
    for seed in 0..5 {
        let m = common::random_model(2, 2, false, 20 + seed);
        let tr = common::data(&m, 12, 30 + seed);
        let b = estep(&m, &tr.u, &tr.y).unwrap();
        let theta = perturb(&m, 0.1, seed);
        let (d, i) = (q3_direct(&theta, &b).unwrap(), q3_instances(&theta, &b).unwrap());
        assert!((d - i).abs() <= 1e-8 * d.abs().max(1.0), "{d} vs {i}");
    }
}

#[test]
fn closed_form_updates_are_stationary() {
    let m = common::random_model(2, 2, false, 40);
    let tr = common::data(&m, 20, 41);
    let b = estep(&m, &tr.u, &tr.y).unwrap();
    let (mu, s1) = mstep_alpha(&b);
    let mut theta = m.clone();
    theta.mu = mu;
    theta.sigma1 = s1;
    theta.sigma_w = mstep_beta(&b);
    let (base1, base2) = (q1(&theta, &b), q2(&theta, &b));
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..10 {
        let mut p = theta.clone();
        p.mu += randn(&mut rng, 2, 1).column(0) * 0.01;
        assert!(q1(&p, &b) < base1);
        let mut p = theta.clone();
        let e = randn(&mut rng, 2, 2) * 1e-3;
        p.sigma_w += &e + e.transpose();
        assert!(q2(&p, &b) < base2);
        let mut p = theta.clone();
        p.sigma1 += &e + e.transpose();
        assert!(q1(&p, &b) < base1);
    }
    // Central-difference gradient in each symmetric direction of Σw.
    let h = 1e-6;
    for (i, j) in [(0, 0), (0, 1), (1, 1)] {
        let mut e = DMatrix::zeros(2, 2);
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        let (mut p, mut q) = (theta.clone(), theta.clone());
        p.sigma_w += &e * h;
        q.sigma_w -= &e * h;
        let g = (q2(&p, &b) - q2(&q, &b)) / (2.0 * h);
        assert!(g.abs() <= 1e-5 * base2.abs().max(1.0), "{g}");
    }
}

#[test]
fn deterministic_limit_reduces_to_the_likelihood() {
    let mk = |a: f64| common::scalar(a, 0.0, 0.05, 0.0);
    let k = mk(0.6);
    let tr = common::data(&common::scalar(0.8, 0.0, 0.05, 0.0), 30, 50);
    let b = estep(&k, &tr.u, &tr.y).unwrap();
    let (lk, qk) = (log_likelihood(&k, &tr.u, &tr.y).unwrap(), q_eval(&k, &b).unwrap());
    for i in 0..=20 {
        let a = -0.9 + 0.09 * i as f64;
        let th = mk(a);
        let dl = log_likelihood(&th, &tr.u, &tr.y).unwrap() - lk;
        let dq = q_eval(&th, &b).unwrap() - qk;
        assert!((dl - dq).abs() < 1e-8, "a={a}: {dl} vs {dq}");
    }
}

#[test]
fn iterates_are_stable_and_likelihood_increases() {
    let truth = common::random_model(2, 2, false, 60);
    let tr = common::data(&truth, 40, 61);
    let m0 = perturb(&truth, 0.1, 62);
    let m0 = ExplicitModel { a: &truth.a * 0.7, ..m0 };
    let h = em_dist_run(&m0, &tr.u, &tr.y, &EmOptions { max_iters: 5, tol: 0.0 }, &MStepOptions::default()).unwrap();
    assert_eq!(h.records.len(), 5, "{:?}", h.termination);
    let path = h.loglik_path();
    for w in path.windows(2) {
        assert!(w[1] >= w[0] - 1e-6, "{path:?}");
    }
    assert!(path[5] > path[0]);
    assert!(h.records.iter().all(|r| r.spectral_radius < 1.0));
}

#[test]
fn singular_disturbance_model_is_identified() {
    let truth = common::msd();
    let tr = common::data(&truth, 40, 70);
    let mut m0 = truth.clone();
    m0.a = &truth.a * 0.95;
    m0.sigma_w *= 3.0;
    let h = em_dist_run(&m0, &tr.u, &tr.y, &EmOptions { max_iters: 3, tol: 0.0 }, &MStepOptions::default()).unwrap();
    assert_eq!(h.records.len(), 3, "{:?}", h.termination);
    assert!(h.final_loglik() > h.initial_loglik);
    assert!(h.records.iter().all(|r| r.spectral_radius < 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn em_inequality_holds(seed in 0u64..10_000, scale in 0.01f64..0.3) {
        let k = common::random_model(2, 1, false, seed);
        let tr = common::data(&k, 10, seed + 1);
        let b = estep(&k, &tr.u, &tr.y).unwrap();
        let th = perturb(&k, scale, seed + 2);
        let dl = log_likelihood(&th, &tr.u, &tr.y).unwrap() - log_likelihood(&k, &tr.u, &tr.y).unwrap();
        let dq = q_eval(&th, &b).unwrap() - q_eval(&k, &b).unwrap();
        prop_assert!(dl >= dq - 1e-7, "{} < {}", dl, dq);
    }

    #[test]
    fn rank_one_terms_rebuild_omega(seed in 0u64..10_000, t in 2usize..12) {
        let k = common::random_model(2, 2, false, seed);
        let tr = common::data(&k, t, seed + 1);
        let b = estep(&k, &tr.u, &tr.y).unwrap();
        let om = &b.posterior.omega;
        let rebuilt: DMatrix<f64> = b.rank_one_terms.iter().map(|w| w * w.transpose()).sum();
        prop_assert!((om - rebuilt).norm() <= 1e-10 * om.norm().max(1.0));
    }
}
