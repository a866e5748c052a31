use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerances, budgets and seeds shared by the quantization solvers.
///
/// Every field has a default, so partial TOML/JSON documents deserialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Fixed-point tolerance, relative to the mean of the (clamped) sample.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial damping factor in `(0, 1]`.
    pub damping: f64,
    /// Number of fixed-point initializations tried; the lowest distortion wins.
    pub multistart: usize,
    pub seed: u64,
    /// DE population; `None` means `15 * dimension`.
    pub de_population: Option<usize>,
    pub de_mutation: f64,
    pub de_crossover: f64,
    pub de_max_generations: usize,
    pub de_rel_tol: f64,
    pub de_patience: usize,
    /// Largest entropic regularization, as a fraction of `Var(X)`.
    pub ot_epsilon_start: f64,
    /// Smallest entropic regularization, as a fraction of `Var(X)`.
    pub ot_epsilon_min: f64,
    pub ot_stages: usize,
    /// Marginal-violation tolerance of the Sinkhorn iterations.
    pub ot_tau: f64,
    pub ot_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            damping: 1.0,
            multistart: 3,
            seed: 42,
            de_population: None,
            de_mutation: 0.8,
            de_crossover: 0.9,
            de_max_generations: 3000,
            de_rel_tol: 1e-13,
            de_patience: 20,
            ot_epsilon_start: 0.1,
            ot_epsilon_min: 1e-4,
            ot_stages: 6,
            ot_tau: 1e-9,
            ot_max_iter: 10_000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_owned()));
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping must lie in (0, 1]");
        }
        if self.multistart == 0 {
            return bad("multistart must be at least 1");
        }
        if !(self.ot_epsilon_start >= self.ot_epsilon_min && self.ot_epsilon_min > 0.0) {
            return bad("need 0 < ot_epsilon_min <= ot_epsilon_start");
        }
        if self.ot_stages == 0 {
            return bad("ot_stages must be at least 1");
        }
        if !(self.ot_tau > 0.0) {
            return bad("ot_tau must be positive");
        }
        Ok(())
    }

    /// Geometric annealing schedule for the entropic regularization, in
    /// units of `Var(X)`, from `ot_epsilon_start` down to `ot_epsilon_min`.
    pub fn epsilon_schedule(&self) -> Vec<f64> {
        geometric_schedule(self.ot_epsilon_start, self.ot_epsilon_min, self.ot_stages)
    }
}

pub(crate) fn geometric_schedule(start: f64, end: f64, stages: usize) -> Vec<f64> {
    if stages <= 1 {
        return vec![end];
    }
    let ratio = (end / start).powf(1.0 / (stages - 1) as f64);
    let mut out: Vec<f64> = (0..stages).map(|s| start * ratio.powi(s as i32)).collect();
    out[stages - 1] = end;
    out
}
