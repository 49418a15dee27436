use crate::model::ExplicitModel;

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loglik: f64,
    pub spectral_radius: f64,
    pub status: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// Iteration aborted; the model is the last accepted iterate.
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct History {
    pub initial_loglik: f64,
    pub initial_spectral_radius: f64,
    /// One record per completed iteration.
    pub records: Vec<IterRecord>,
    pub model: ExplicitModel,
    pub termination: Termination,
}

impl History {
    pub fn final_loglik(&self) -> f64 {
        self.records.last().map_or(self.initial_loglik, |r| r.loglik)
    }

    /// Log-likelihood sequence including the initial value.
    pub fn loglik_path(&self) -> Vec<f64> {
        std::iter::once(self.initial_loglik).chain(self.records.iter().map(|r| r.loglik)).collect()
    }

    /// First iteration whose log-likelihood is within `nats` of the final value.
    pub fn iterations_to_within(&self, nats: f64) -> usize {
        let path = self.loglik_path();
        let fin = *path.last().expect("non-empty");
        path.iter().position(|l| fin - l <= nats).unwrap_or(path.len() - 1)
    }

    /// First iteration whose log-likelihood is at least `level`, if any.
    pub fn iterations_to_reach(&self, level: f64) -> Option<usize> {
        self.loglik_path().iter().position(|l| *l >= level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop when the log-likelihood increase drops below this.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iters: 500, tol: 1e-4 }
    }
}
