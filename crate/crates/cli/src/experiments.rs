//! The four experiment drivers. Each returns a structured outcome (used by the
//! acceptance suite) that renders to a [`Table`].

use lgss_core::em_dist::{default_initial_model, em_dist_run, estep, q1, q2, q_eval};
use lgss_core::em_states::{em_states_run, q_states, state_moments};
use lgss_core::history::{EmOptions, History, Termination};
use lgss_core::inference::{log_likelihood, rts_smoother};
use lgss_core::lagrangian::{fit_tight_multipliers, q3_lower_bound, qhat, MStepOptions};
use lgss_core::model::{
    make_random_stable_system, mass_spring_damper, outputs, sample_trajectory, simulate, white_input,
    Dimensions, ExplicitModel, ImplicitModel, MassSpringDamper, NoiseLevels, RandomSystemSpec, Trajectory,
};
use lgss_core::{Exec, LgssError};
use nalgebra::{DMatrix, DVector};

use crate::config::{ExperimentConfig, Regime};
use crate::output::{fmt_f64, Table};
use crate::CliError;

pub const DIST: &str = "latent-disturbances";
pub const STATES: &str = "latent-states";

/// Independent seeds for the pieces of one trial.
pub fn sub_seed(seed: u64, trial: u64, stream: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(trial.wrapping_mul(16)).wrapping_add(stream)
}

fn mstep_options(cfg: &ExperimentConfig, exec: Exec) -> MStepOptions {
    MStepOptions { shared_h: cfg.shared_h, exec, ..MStepOptions::default() }
}

fn em_options(max_iters: usize, tol: f64) -> EmOptions {
    EmOptions { max_iters, tol }
}

// ---------------------------------------------------------------- bound sweep

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub regime: String,
    pub a: f64,
    pub loglik: f64,
    pub q_ls: f64,
    pub q_ld: f64,
    pub qbar: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
}

/// Per-regime gap summary over the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepGaps {
    pub max_gap_ld: f64,
    pub max_gap_ls: f64,
    pub max_abs_ld_minus_l: f64,
}

impl SweepOutcome {
    pub fn gaps(&self, regime: &str) -> Option<SweepGaps> {
        let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.regime == regime).collect();
        if rows.is_empty() {
            return None;
        }
        let max = |f: &dyn Fn(&SweepRow) -> f64| rows.iter().map(|r| f(r)).fold(f64::NEG_INFINITY, f64::max);
        Some(SweepGaps {
            max_gap_ld: max(&|r| r.loglik - r.q_ld),
            // NaN (singular state covariance) propagates: no comparison is possible.
            max_gap_ls: rows.iter().map(|r| r.loglik - r.q_ls).fold(f64::NEG_INFINITY, |a, b| {
                if a.is_nan() || b.is_nan() {
                    f64::NAN
                } else {
                    a.max(b)
                }
            }),
            max_abs_ld_minus_l: max(&|r| (r.q_ld - r.loglik).abs()),
        })
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["regime", "A", "loglik", "Q_ls", "Q_ld", "Qbar"]);
        for r in &self.rows {
            t.push(vec![
                r.regime.clone(),
                fmt_f64(r.a),
                fmt_f64(r.loglik),
                fmt_f64(r.q_ls),
                fmt_f64(r.q_ld),
                fmt_f64(r.qbar),
            ]);
        }
        t
    }
}

pub fn scalar_model(a: f64, r: &Regime) -> ExplicitModel {
    let one = DMatrix::from_element(1, 1, 1.0);
    ExplicitModel {
        mu: DVector::zeros(1),
        sigma1: &one * r.sigma1,
        sigma_w: &one * r.sigma_w,
        sigma_v: &one * r.sigma_v,
        a: &one * a,
        b: one.clone(),
        g: one.clone(),
        c: one.clone(),
        d: DMatrix::zeros(1, 1),
    }
}

/// Log-likelihood and the three auxiliary functions over a grid of scalar `A`.
/// Every auxiliary function is shifted to meet the likelihood at `A_k`
/// (`Qbar` uses the same shift as `Q_ld`, since the two agree there).
pub fn run_bound_sweep(cfg: &ExperimentConfig, seed: u64, exec: Exec) -> Result<SweepOutcome, CliError> {
    let grid = cfg.grid.values();
    let mut rows = Vec::new();
    for (ri, regime) in cfg.regimes.iter().enumerate() {
        let truth = scalar_model(cfg.a_true, regime);
        let u = white_input(1, cfg.horizon, sub_seed(seed, ri as u64, 0));
        let tr = sample_trajectory(&truth, &u, sub_seed(seed, ri as u64, 1))?;
        let (u, y) = (&tr.u, &tr.y);
        let mk = scalar_model(cfg.a_k, regime);

        let lk = log_likelihood(&mk, u, y)?;
        let bundle = estep(&mk, u, y)?;
        let qk = q_eval(&mk, &bundle)?;
        let moments = state_moments(&rts_smoother(&mk, u, y)?, u, y);
        let qsk = q_states(&mk, &moments);
        let eta_k = ImplicitModel::from_system(&mk.system());
        let mopts = MStepOptions { exec, ..MStepOptions::default() };
        let (mults, _) = fit_tight_multipliers(&eta_k, &bundle.instances, &mopts)?;

        let evals = exec.map(&grid, |_, &a| -> Result<SweepRow, LgssError> {
            let th = scalar_model(a, regime);
            let loglik = log_likelihood(&th, u, y)?;
            let q_ld = q_eval(&th, &bundle)? - qk + lk;
            let q_ls = q_states(&th, &moments) - qsk + lk;
            let eta = ImplicitModel::from_system(&th.system());
            // Outside the multiplier's certified region the bound may not exist.
            let qbar = match qhat(&eta, &mults, &bundle.instances, &mk.sigma_v) {
                Ok(qh) => q1(&th, &bundle) + q2(&th, &bundle) + q3_lower_bound(qh, cfg.horizon, 1) - qk + lk,
                Err(_) => f64::NAN,
            };
            Ok(SweepRow { regime: regime.name.clone(), a, loglik, q_ls, q_ld, qbar })
        });
        for r in evals {
            rows.push(r?);
        }
    }
    Ok(SweepOutcome { rows })
}

// ---------------------------------------------------------------- convergence

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub true_loglik: f64,
    pub states: Result<History, String>,
    pub dist: Result<History, String>,
}

impl TrialOutcome {
    /// Best final log-likelihood over the algorithms that completed.
    pub fn best_final(&self) -> f64 {
        [&self.dist, &self.states].iter().filter_map(|h| h.as_ref().ok()).map(|h| h.final_loglik()).fold(f64::NAN, f64::max)
    }

    pub fn iterations_to_best(&self, algorithm: &str, nats: f64) -> f64 {
        let level = self.best_final() - nats;
        self.history(algorithm).ok().and_then(|h| h.iterations_to_reach(level)).map_or(f64::INFINITY, |i| i as f64)
    }

    pub fn history(&self, algorithm: &str) -> Result<&History, &String> {
        if algorithm == DIST {
            self.dist.as_ref()
        } else {
            self.states.as_ref()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceOutcome {
    pub trials: Vec<TrialOutcome>,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ConvergenceOutcome {
    /// Median over successful trials of the first iteration within `nats`
    /// of that run's final log-likelihood.
    pub fn median_iterations_to_within(&self, algorithm: &str, nats: f64) -> f64 {
        let mut v: Vec<f64> = self
            .trials
            .iter()
            .filter_map(|t| t.history(algorithm).ok())
            .map(|h| h.iterations_to_within(nats) as f64)
            .collect();
        median(&mut v)
    }

    /// Median over trials of the first iteration within `nats` of the best
    /// final log-likelihood either algorithm reached on that trial; a run that
    /// never gets there (or failed) counts as infinite.
    pub fn median_iterations_to_best(&self, algorithm: &str, nats: f64) -> f64 {
        let mut v: Vec<f64> = self.trials.iter().map(|t| t.iterations_to_best(algorithm, nats)).collect();
        median(&mut v)
    }

    pub fn table(&self, timing: bool) -> Table {
        let mut cols = vec!["trial", "algorithm", "iter", "loglik", "loglik_gap", "spectral_radius", "status"];
        if timing {
            cols.push("wall_ms");
        }
        let mut t = Table::new(&cols);
        for tr in &self.trials {
            for alg in [DIST, STATES] {
                history_rows(&mut t, &[tr.trial.to_string(), alg.to_string()], tr.history(alg), tr.true_loglik, timing);
            }
            t.notes.push(format!(
                "trial {} true_loglik={} best_final={} iterations_to_within_0.1 (own final / best final): {}={}/{} {}={}/{}",
                tr.trial,
                fmt_f64(tr.true_loglik),
                fmt_f64(tr.best_final()),
                DIST,
                tr.dist.as_ref().map_or("failed".into(), |h| h.iterations_to_within(0.1).to_string()),
                fmt_f64(tr.iterations_to_best(DIST, 0.1)),
                STATES,
                tr.states.as_ref().map_or("failed".into(), |h| h.iterations_to_within(0.1).to_string()),
                fmt_f64(tr.iterations_to_best(STATES, 0.1)),
            ));
        }
        t.notes.push(format!(
            "median iterations_to_within_0.1 (own final / best final): {}={}/{} {}={}/{}",
            DIST,
            fmt_f64(self.median_iterations_to_within(DIST, 0.1)),
            fmt_f64(self.median_iterations_to_best(DIST, 0.1)),
            STATES,
            fmt_f64(self.median_iterations_to_within(STATES, 0.1)),
            fmt_f64(self.median_iterations_to_best(STATES, 0.1)),
        ));
        t
    }
}

/// Rows for iteration 0 (the initial model) through the last record, plus a
/// final row describing a failure if the run aborted.
fn history_rows(t: &mut Table, key: &[String], h: Result<&History, &String>, reference: f64, timing: bool) {
    let row = |iter: usize, ll: f64, rho: f64, status: &str, ms: f64| {
        let mut r = key.to_vec();
        r.extend([iter.to_string(), fmt_f64(ll), fmt_f64(ll - reference), fmt_f64(rho), status.to_string()]);
        if timing {
            r.push(fmt_f64(ms.round()));
        }
        r
    };
    match h {
        Ok(h) => {
            t.push(row(0, h.initial_loglik, h.initial_spectral_radius, "initial", 0.0));
            for rec in &h.records {
                t.push(row(rec.iter, rec.loglik, rec.spectral_radius, &rec.status, rec.wall_ms));
            }
            if let Termination::Failed(msg) = &h.termination {
                t.push(row(h.records.len() + 1, f64::NAN, f64::NAN, &format!("failed: {msg}"), 0.0));
            }
        }
        Err(msg) => t.push(row(0, f64::NAN, f64::NAN, &format!("error: {msg}"), 0.0)),
    }
}

/// Random stable SISO system with `G = I`, `C` rescaled so that the variance
/// of the noiseless output is `snr · Σv`, plus a data record.
pub fn snr_system(cfg: &ExperimentConfig, seed: u64) -> Result<(ExplicitModel, Trajectory), LgssError> {
    let dims = Dimensions { nx: cfg.nx, nu: cfg.nu, ny: cfg.ny, nw: cfg.nx };
    let spec = RandomSystemSpec {
        dims,
        spectral_radius: cfg.true_radius,
        identity_g: true,
        feedthrough: false,
        noise: NoiseLevels { sigma1: cfg.sigma1, sigma_w: cfg.sigma_w, sigma_v: cfg.sigma_v },
    };
    let mut truth = make_random_stable_system(&spec, sub_seed(seed, 0, 0))?;
    let u = white_input(cfg.nu, cfg.horizon, sub_seed(seed, 0, 1));
    if let Some(snr) = cfg.snr {
        let x = simulate(&truth, &u, &truth.mu, &DMatrix::zeros(cfg.nx, cfg.horizon))?;
        let y0 = outputs(&truth.c, &truth.d, &x, &u);
        let n = y0.len() as f64;
        let mean = y0.sum() / n;
        let var = y0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var > 0.0 {
            truth.c *= (snr * cfg.sigma_v / var).sqrt();
        }
    }
    let tr = sample_trajectory(&truth, &u, sub_seed(seed, 0, 2))?;
    Ok((truth, tr))
}

/// Shared starting point for both algorithms: random stable system, `G = I`.
fn initial_model(cfg: &ExperimentConfig, y: &DMatrix<f64>, seed: u64) -> Result<ExplicitModel, LgssError> {
    let dims = Dimensions { nx: cfg.nx, nu: cfg.nu, ny: cfg.ny, nw: cfg.nx };
    let mut m0 = default_initial_model(dims, y, sub_seed(seed, 0, 3))?;
    m0.g = DMatrix::identity(cfg.nx, cfg.nx);
    Ok(m0)
}

fn run_trial(cfg: &ExperimentConfig, trial: usize, seed: u64, exec: Exec) -> TrialOutcome {
    let s = sub_seed(seed, trial as u64, 0);
    let setup = snr_system(cfg, s).and_then(|(truth, tr)| {
        let m0 = initial_model(cfg, &tr.y, s)?;
        let l = log_likelihood(&truth, &tr.u, &tr.y)?;
        Ok((tr, m0, l))
    });
    let (tr, m0, true_loglik) = match setup {
        Ok(v) => v,
        Err(e) => {
            return TrialOutcome { trial, true_loglik: f64::NAN, states: Err(e.to_string()), dist: Err(e.to_string()) }
        }
    };
    let states = em_states_run(&m0, &tr.u, &tr.y, &em_options(cfg.baseline_max_iters, cfg.tol)).map_err(|e| e.to_string());
    let dist = em_dist_run(&m0, &tr.u, &tr.y, &em_options(cfg.max_iters, cfg.tol), &mstep_options(cfg, exec))
        .map_err(|e| e.to_string());
    TrialOutcome { trial, true_loglik, states, dist }
}

/// Both algorithms on identical data and initialisation, one trial per seed
/// offset. Failures are recorded per trial and do not stop the run.
pub fn run_convergence(cfg: &ExperimentConfig, seed: u64, exec: Exec) -> ConvergenceOutcome {
    let trials = exec.map_range(cfg.trials, |i| run_trial(cfg, i, seed, exec));
    ConvergenceOutcome { trials }
}

// ------------------------------------------------------------------ stability

#[derive(Debug, Clone)]
pub struct StabilityOutcome {
    /// Seed of the data set on which the baseline went unstable.
    pub seed: u64,
    pub first_unstable_iter: usize,
    pub true_radius: f64,
    pub true_loglik: f64,
    pub states: History,
    pub dist: History,
}

impl StabilityOutcome {
    pub fn max_radius(&self, algorithm: &str) -> f64 {
        let h = if algorithm == DIST { &self.dist } else { &self.states };
        h.records.iter().map(|r| r.spectral_radius).fold(h.initial_spectral_radius, f64::max)
    }

    pub fn table(&self, timing: bool) -> Table {
        let mut cols = vec!["algorithm", "iter", "loglik", "loglik_gap", "spectral_radius", "status"];
        if timing {
            cols.push("wall_ms");
        }
        let mut t = Table::new(&cols);
        t.notes.push(format!(
            "data seed {} true spectral radius {}; {} first unstable at iteration {}",
            self.seed,
            fmt_f64(self.true_radius),
            STATES,
            self.first_unstable_iter
        ));
        history_rows(&mut t, &[DIST.to_string()], Ok(&self.dist), self.true_loglik, timing);
        history_rows(&mut t, &[STATES.to_string()], Ok(&self.states), self.true_loglik, timing);
        t
    }
}

/// Searches data seeds `seed, seed + 1, …` until the latent-states baseline
/// produces an iterate with spectral radius above one, then runs EM with
/// latent disturbances on the same data and initialisation.
pub fn run_stability(cfg: &ExperimentConfig, seed: u64, exec: Exec) -> Result<StabilityOutcome, CliError> {
    for k in 0..cfg.seed_search as u64 {
        let s = seed.wrapping_add(k);
        let Ok((truth, tr)) = snr_system(cfg, s) else { continue };
        let Ok(m0) = initial_model(cfg, &tr.y, s) else { continue };
        let Ok(states) = em_states_run(&m0, &tr.u, &tr.y, &em_options(cfg.baseline_max_iters, cfg.tol)) else {
            continue;
        };
        let Some(first) = states.records.iter().find(|r| r.spectral_radius > 1.0).map(|r| r.iter) else {
            continue;
        };
        let dist = em_dist_run(&m0, &tr.u, &tr.y, &em_options(cfg.max_iters, cfg.tol), &mstep_options(cfg, exec))?;
        let true_loglik = log_likelihood(&truth, &tr.u, &tr.y)?;
        return Ok(StabilityOutcome {
            seed: s,
            first_unstable_iter: first,
            true_radius: truth.spectral_radius(),
            true_loglik,
            states,
            dist,
        });
    }
    Err(CliError::Solver(LgssError::Solver(format!(
        "no seed in {seed}..{} made the baseline unstable",
        seed.wrapping_add(cfg.seed_search as u64)
    ))))
}

// ------------------------------------------------------------------- singular

#[derive(Debug)]
pub struct SingularOutcome {
    pub truth: ExplicitModel,
    pub rank_gsg: usize,
    pub dist: History,
    pub baseline_error: Option<LgssError>,
}

impl SingularOutcome {
    pub fn table(&self, timing: bool) -> Table {
        let mut cols = vec!["algorithm", "iter", "loglik", "loglik_gap", "spectral_radius", "status"];
        if timing {
            cols.push("wall_ms");
        }
        let mut t = Table::new(&cols);
        t.notes.push(format!("rank(G Sigma_w G') = {}", self.rank_gsg));
        history_rows(&mut t, &[DIST.to_string()], Ok(&self.dist), self.dist.initial_loglik, timing);
        let status = match &self.baseline_error {
            Some(e) => format!("rejected: {e}"),
            None => "accepted".to_string(),
        };
        let mut r = vec![STATES.to_string(), "0".into(), "NaN".into(), "NaN".into(), "NaN".into(), status];
        if timing {
            r.push("0".into());
        }
        t.push(r);
        t
    }
}

/// Numerical rank of a symmetric PSD matrix (eigenvalues above `1e-12 · λ_max`).
pub fn psd_rank(m: &DMatrix<f64>) -> usize {
    let ev = m.clone().symmetric_eigenvalues();
    let top = ev.amax();
    if top == 0.0 {
        return 0;
    }
    ev.iter().filter(|&&l| l > 1e-12 * top).count()
}

/// Mass-spring-damper data (force input and disturbance share a channel);
/// both algorithms start from the same random model with `n_w = 1`.
pub fn run_singular(cfg: &ExperimentConfig, seed: u64, exec: Exec) -> Result<SingularOutcome, CliError> {
    let noise = NoiseLevels { sigma1: cfg.sigma1, sigma_w: cfg.sigma_w, sigma_v: cfg.sigma_v };
    let truth = mass_spring_damper(
        &MassSpringDamper::default(),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::zeros(1, 1),
        noise,
    )?;
    let rank_gsg = psd_rank(&(&truth.g * &truth.sigma_w * truth.g.transpose()));
    let u = white_input(1, cfg.horizon, sub_seed(seed, 0, 1));
    let tr = sample_trajectory(&truth, &u, sub_seed(seed, 0, 2))?;
    let dims = Dimensions { nx: 2, nu: 1, ny: 1, nw: 1 };
    let m0 = default_initial_model(dims, &tr.y, sub_seed(seed, 0, 3))?;
    let baseline_error = em_states_run(&m0, &tr.u, &tr.y, &em_options(cfg.baseline_max_iters, cfg.tol)).err();
    let dist = em_dist_run(&m0, &tr.u, &tr.y, &em_options(cfg.max_iters, cfg.tol), &mstep_options(cfg, exec))?;
    Ok(SingularOutcome { truth, rank_gsg, dist, baseline_error })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn rank_of_outer_product() {
        let v = DMatrix::from_column_slice(2, 1, &[0.0, 0.1]);
        assert_eq!(psd_rank(&(&v * v.transpose())), 1);
        assert_eq!(psd_rank(&DMatrix::identity(3, 3)), 3);
        assert_eq!(psd_rank(&DMatrix::zeros(2, 2)), 0);
    }

    #[test]
    fn snr_scaling_hits_target() {
        let cfg = ExperimentConfig::defaults(crate::config::ExperimentKind::Convergence);
        let (truth, tr) = snr_system(&cfg, 3).unwrap();
        let x = simulate(&truth, &tr.u, &truth.mu, &DMatrix::zeros(cfg.nx, cfg.horizon)).unwrap();
        let y0 = outputs(&truth.c, &truth.d, &x, &tr.u);
        let n = y0.len() as f64;
        let mean = y0.sum() / n;
        let var = y0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var / cfg.sigma_v - 100.0).abs() < 1e-9 * 100.0);
        assert!((truth.spectral_radius() - 0.9).abs() < 1e-9);
    }
}
