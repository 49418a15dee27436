use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use lgss_core::em_dist::{default_initial_model, em_dist_run};
use lgss_core::em_states::em_states_run;
use lgss_core::history::{EmOptions, History, Termination};
use lgss_core::lagrangian::MStepOptions;
use lgss_core::model::{sample_trajectory, white_input, Dimensions};
use lgss_core::Exec;
use nalgebra::DMatrix;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::experiments::{run_bound_sweep, run_convergence, run_singular, run_stability};
use crate::io::{read_data, read_model, trajectory_table, write_model};
use crate::output::{provenance, version_string, Table};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "lgss", version, about = "Identify linear Gaussian state-space models by EM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a data record from a model file (white unit-variance input).
    Simulate {
        /// Model JSON (fields mu, Sigma1, Sigma_w, Sigma_v, A, B, G, C, D; matrices as row lists).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        seed: u64,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit a model to a CSV with columns u1.., y1.. and write it as JSON.
    Identify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        nx: usize,
        /// Disturbance dimension; defaults to nx.
        #[arg(long)]
        nw: Option<usize>,
        #[arg(long, value_enum, default_value_t = Algorithm::Disturbances)]
        algorithm: Algorithm,
        /// Starting model; a random stable model is drawn when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Seed for the random starting model.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Share one multiplier across instances in the M-step (faster, looser).
        #[arg(long)]
        shared_h: bool,
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run an experiment and write its CSV.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
        /// Required so every CSV is reproducible.
        #[arg(long)]
        seed: u64,
        /// JSON config; fields not given keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config field, e.g. `--set trials=10 --set grid.points=21`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Horizon 250 instead of the desk-scale 100.
        #[arg(long)]
        full_scale: bool,
        /// Add a wall_ms column (makes the output non-reproducible).
        #[arg(long)]
        timing: bool,
        /// Run trials and instances on one thread.
        #[arg(long)]
        sequential: bool,
        /// CSV destination; overrides the config's `output`; stdout when neither is set.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algorithm {
    /// EM with latent disturbances (stability-constrained).
    Disturbances,
    /// Classical EM with latent states; requires G Sigma_w G' nonsingular.
    States,
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lgss: {e}");
            e.exit_code()
        }
    }
}

fn emit(bytes: &[u8], dest: Option<&Path>) -> Result<(), CliError> {
    match dest {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn exec_for(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn summarize(h: &History) {
    let how = match &h.termination {
        Termination::Converged => "converged".to_string(),
        Termination::MaxIterations => "iteration cap reached".to_string(),
        Termination::Failed(m) => format!("stopped: {m}"),
    };
    eprintln!(
        "{} iterations, log-likelihood {:.6} -> {:.6}, spectral radius {:.4} ({how})",
        h.records.len(),
        h.initial_loglik,
        h.final_loglik(),
        h.model.spectral_radius()
    );
}

/// Builds the experiment table for a resolved config.
pub fn experiment_table(cfg: &ExperimentConfig, seed: u64, timing: bool, exec: Exec) -> Result<Table, CliError> {
    Ok(match cfg.kind {
        ExperimentKind::BoundSweep => run_bound_sweep(cfg, seed, exec)?.table(),
        ExperimentKind::Convergence => run_convergence(cfg, seed, exec).table(timing),
        ExperimentKind::Stability => run_stability(cfg, seed, exec)?.table(timing),
        ExperimentKind::Singular => run_singular(cfg, seed, exec)?.table(timing),
    })
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Simulate { model, horizon, seed, output } => {
            if horizon == 0 {
                return Err(CliError::Config("horizon must be >= 1".into()));
            }
            let m = read_model(&model)?;
            let u = white_input(m.dims().nu, horizon, seed.wrapping_add(1));
            let tr = sample_trajectory(&m, &u, seed)?;
            let prov = format!("lgss {} simulate model={} seed={seed}", version_string(), model.display());
            emit(&trajectory_table(&tr).to_csv(&prov)?, output.as_deref())
        }
        Command::Identify { data, nx, nw, algorithm, init, max_iters, tol, seed, shared_h, sequential, output } => {
            let (u, y) = read_data(&data)?;
            let m0 = match init {
                Some(p) => read_model(&p)?,
                None => {
                    if nx == 0 {
                        return Err(CliError::Config("nx must be >= 1".into()));
                    }
                    let dims = Dimensions { nx, nu: u.nrows(), ny: y.nrows(), nw: nw.unwrap_or(nx) };
                    let mut m = default_initial_model(dims, &y, seed)?;
                    if dims.nw == nx {
                        m.g = DMatrix::identity(nx, nx);
                    }
                    m
                }
            };
            m0.check_signals(&u, &y)?;
            let opts = EmOptions { max_iters, tol };
            let h = match algorithm {
                Algorithm::Disturbances => {
                    let mo = MStepOptions { shared_h, exec: exec_for(sequential), ..MStepOptions::default() };
                    em_dist_run(&m0, &u, &y, &opts, &mo)?
                }
                Algorithm::States => em_states_run(&m0, &u, &y, &opts)?,
            };
            summarize(&h);
            write_model(&output, &h.model)?;
            if let Termination::Failed(m) = &h.termination {
                if h.records.is_empty() {
                    return Err(CliError::Solver(lgss_core::LgssError::Solver(m.clone())));
                }
            }
            Ok(())
        }
        Command::Experiment { kind, seed, config, sets, full_scale, timing, sequential, output } => {
            let mut sets = sets;
            if full_scale {
                sets.insert(0, "horizon=250".into());
            }
            let cfg = ExperimentConfig::resolve(kind, config.as_deref(), &sets)?;
            let table = experiment_table(&cfg, seed, timing, exec_for(sequential))?;
            let bytes = table.to_csv(&provenance(kind.name(), &cfg.hash(), seed))?;
            emit(&bytes, output.as_deref().or(cfg.output.as_deref()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one_and_help_exits_zero() {
        assert_eq!(run(["lgss", "frobnicate"]), 1);
        assert_eq!(run(["lgss"]), 1);
        assert_eq!(run(["lgss", "experiment", "convergence"]), 1, "seed is mandatory");
        assert_eq!(run(["lgss", "--help"]), 0);
    }

    #[test]
    fn bad_override_is_a_config_error() {
        assert_eq!(run(["lgss", "experiment", "singular", "--seed", "1", "--set", "nope=3"]), 1);
        assert_eq!(run(["lgss", "experiment", "bound-sweep", "--seed", "1", "--set", "grid.points=1"]), 1);
    }
}
