//! Bound-constrained Differential Evolution (DE/rand/1/bin).
//!
//! Each generation builds one trial vector per target from the population as
//! it stood at the start of the generation, so trial construction and
//! objective evaluation are order independent. Every (generation, individual)
//! pair draws from its own ChaCha stream keyed by the seed, which makes runs
//! bit-identical regardless of how many threads evaluate the objective.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DEConfig {
    pub population_size: usize,
    /// `F` in `[0, 2]`.
    pub mutation_factor: f64,
    /// `CR` in `[0, 1]`.
    pub crossover_rate: f64,
    pub max_generations: usize,
    /// Relative best-fitness improvement below which a generation counts as stalled.
    pub rel_tol: f64,
    /// Number of consecutive stalled generations that ends the run.
    pub patience: usize,
    pub seed: u64,
    pub bounds: Vec<(f64, f64)>,
}

impl DEConfig {
    /// Standard settings: `NP = 15 d`, `F = 0.8`, `CR = 0.9`, `eps = 1e-10`.
    pub fn new(bounds: Vec<(f64, f64)>) -> Self {
        Self {
            population_size: (15 * bounds.len()).max(4),
            mutation_factor: 0.8,
            crossover_rate: 0.9,
            max_generations: 1000,
            rel_tol: 1e-10,
            patience: 20,
            seed: 0,
            bounds,
        }
    }

    pub fn dimension(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.population_size < 4 {
            return bad(format!(
                "population size {} is below 4; three distinct donors are required",
                self.population_size
            ));
        }
        if self.bounds.is_empty() {
            return bad("at least one dimension is required".into());
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("bounds of dimension {j} must be finite with low < high"));
            }
        }
        if !(0.0..=2.0).contains(&self.mutation_factor) {
            return bad(format!("mutation factor {} outside [0, 2]", self.mutation_factor));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return bad(format!("crossover rate {} outside [0, 1]", self.crossover_rate));
        }
        if !(self.rel_tol >= 0.0) {
            return bad("relative tolerance must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DEResult {
    pub x_best: Vec<f64>,
    pub f_best: f64,
    pub generations_used: usize,
    /// Best fitness after initialization and after every generation.
    pub best_trace: Vec<f64>,
    /// Whether the relative-improvement criterion fired before the budget ran out.
    pub converged: bool,
}

/// Position in the random stream: the seed and the next generation index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeRng {
    pub seed: u64,
    pub generation: u64,
}

impl DeRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, generation: 0 }
    }

    fn stream(&self, individual: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.generation << 24) | individual as u64);
        rng
    }

    fn init_stream(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        rng
    }
}

/// Folds `x` back into `[lo, hi]` by mirror reflection at the bounds.
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if x >= lo && x <= hi {
        return x;
    }
    let width = hi - lo;
    let period = 2.0 * width;
    let mut t = (x - lo) % period;
    if t < 0.0 {
        t += period;
    }
    let y = if t <= width { lo + t } else { hi - (t - width) };
    y.clamp(lo, hi)
}

fn sanitize(f: f64) -> f64 {
    if f.is_nan() {
        f64::INFINITY
    } else {
        f
    }
}

fn evaluate<F>(objective: &F, points: &[Vec<f64>]) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    points.par_iter().map(|x| sanitize(objective(x))).collect()
}

/// Builds the DE/rand/1/bin trial vector for target `i`.
fn trial_vector(population: &[Vec<f64>], i: usize, cfg: &DEConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let np = population.len();
    let d = cfg.dimension();
    let mut pick = |taken: &[usize]| loop {
        let r = rng.random_range(0..np);
        if !taken.contains(&r) {
            break r;
        }
    };
    let r1 = pick(&[i]);
    let r2 = pick(&[i, r1]);
    let r3 = pick(&[i, r1, r2]);
    let j_rand = rng.random_range(0..d);
    let target = &population[i];
    (0..d)
        .map(|j| {
            let take_mutant = rng.random::<f64>() <= cfg.crossover_rate || j == j_rand;
            if take_mutant {
                let v = population[r1][j]
                    + cfg.mutation_factor * (population[r2][j] - population[r3][j]);
                let (lo, hi) = cfg.bounds[j];
                reflect(v, lo, hi)
            } else {
                target[j]
            }
        })
        .collect()
}

/// One generation: mutation, binomial crossover, reflection into the box and
/// greedy selection (a trial replaces its target when it is no worse).
pub fn de_step<F>(
    population: &[Vec<f64>],
    fitness: &[f64],
    objective: &F,
    cfg: &DEConfig,
    rng: DeRng,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, DeRng)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let np = population.len();
    if np < 4 {
        return Err(Error::InvalidConfig(format!(
            "population of {np} cannot supply three distinct donors"
        )));
    }
    if fitness.len() != np || population.iter().any(|x| x.len() != cfg.dimension()) {
        return Err(Error::Dimension("population, fitness and bounds disagree".into()));
    }
    let trials: Vec<Vec<f64>> = (0..np)
        .map(|i| trial_vector(population, i, cfg, &mut rng.stream(i)))
        .collect();
    let trial_fitness = evaluate(objective, &trials);

    let mut next_pop = Vec::with_capacity(np);
    let mut next_fit = Vec::with_capacity(np);
    for (i, (trial, ft)) in trials.into_iter().zip(trial_fitness).enumerate() {
        if ft <= fitness[i] {
            next_pop.push(trial);
            next_fit.push(ft);
        } else {
            next_pop.push(population[i].clone());
            next_fit.push(fitness[i]);
        }
    }
    Ok((
        next_pop,
        next_fit,
        DeRng {
            seed: rng.seed,
            generation: rng.generation + 1,
        },
    ))
}

/// Stratified uniform start: each coordinate's range is cut into `NP` strata
/// and every stratum receives exactly one individual.
pub fn initial_population(cfg: &DEConfig) -> Vec<Vec<f64>> {
    let np = cfg.population_size;
    let mut rng = DeRng::new(cfg.seed).init_stream();
    let mut pop = vec![vec![0.0; cfg.dimension()]; np];
    for (j, &(lo, hi)) in cfg.bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..np).collect();
        strata.shuffle(&mut rng);
        for (i, s) in strata.into_iter().enumerate() {
            let u: f64 = rng.random();
            pop[i][j] = lo + (s as f64 + u) / np as f64 * (hi - lo);
        }
    }
    pop
}

fn best_of(fitness: &[f64]) -> usize {
    let mut best = 0;
    for (i, &f) in fitness.iter().enumerate() {
        if f < fitness[best] {
            best = i;
        }
    }
    best
}

/// Minimizes `objective` over the box in `cfg.bounds`.
///
/// Stops after `max_generations`, or once the relative change of the best
/// fitness, `|f_g - f_{g-1}| / |f_{g-1}|`, stayed below `rel_tol` for
/// `patience` consecutive generations. A best fitness of exactly zero counts
/// as converged, since the ratio is undefined there.
pub fn de_minimize<F>(objective: F, cfg: &DEConfig) -> Result<DEResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let mut population = initial_population(cfg);
    let mut fitness = evaluate(&objective, &population);
    let mut rng = DeRng::new(cfg.seed);
    let mut best = best_of(&fitness);
    let mut trace = vec![fitness[best]];
    let mut stalled = 0;
    let mut converged = false;
    let mut generations = 0;

    while generations < cfg.max_generations {
        if fitness[best] == 0.0 {
            converged = true;
            break;
        }
        let prev = fitness[best];
        let (p, f, r) = de_step(&population, &fitness, &objective, cfg, rng)?;
        population = p;
        fitness = f;
        rng = r;
        generations += 1;
        best = best_of(&fitness);
        let cur = fitness[best];
        trace.push(cur);

        let rel = if prev.is_finite() {
            (cur - prev).abs() / prev.abs()
        } else {
            f64::INFINITY
        };
        if rel < cfg.rel_tol {
            stalled += 1;
        } else {
            stalled = 0;
        }
        if stalled >= cfg.patience {
            converged = true;
            break;
        }
    }

    Ok(DEResult {
        x_best: population[best].clone(),
        f_best: fitness[best],
        generations_used: generations,
        best_trace: trace,
        converged,
    })
}
