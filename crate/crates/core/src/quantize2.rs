//! Two-point magnitude/propensity quantizer with a knot pinned at zero.
//!
//! The codebook is `{0, m}`; the Voronoi threshold is `a = m / 2`. A critical
//! pair solves `2a = E[X | X > a]`, after which `m = 2a` and `p = P(X > a)`.

use serde::{Deserialize, Serialize};

use crate::config::SolverConfig;
use crate::distribution::EmpiricalDistribution;
use crate::error::{Error, Result};

/// One fixed point found by the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint2 {
    pub a: f64,
    pub m: f64,
    pub p: f64,
    pub distortion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantizer2 {
    /// Magnitude of the loss point.
    pub m: f64,
    /// Propensity `P(X > a)`.
    pub p: f64,
    /// Threshold `m / 2`.
    pub a: f64,
    pub distortion: f64,
    pub iterations: usize,
    /// `|2a - E[X | X > a]|` at the reported solution.
    pub residual: f64,
    pub converged: bool,
    /// Every distinct fixed point reached from the configured starts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed_points: Vec<FixedPoint2>,
}

/// `E[min(X^2, (X - m)^2)]`.
pub fn distortion2(dist: &EmpiricalDistribution, m: f64) -> f64 {
    dist.atoms()
        .iter()
        .map(|a| a.weight * (a.value * a.value).min((a.value - m).powi(2)))
        .sum()
}

struct Run {
    a: f64,
    iterations: usize,
    residual: f64,
    converged: bool,
}

/// Damped iteration `a <- (1 - l) a + l E[X | X > a] / 2`.
fn iterate(x: &EmpiricalDistribution, a0: f64, cfg: &SolverConfig) -> Run {
    let tol = cfg.tol * x.mean();
    let mut lambda = cfg.damping;
    let mut restart = a0;
    let mut a = a0;
    let mut signs: Vec<bool> = Vec::new();
    let mut best = Run {
        a,
        iterations: 0,
        residual: f64::INFINITY,
        converged: false,
    };
    for it in 1..=cfg.max_iter {
        let tail = match x.conditional_mean(a, f64::INFINITY) {
            Ok(t) => t,
            Err(_) => {
                restart /= 2.0;
                a = restart;
                signs.clear();
                continue;
            }
        };
        let r = tail - 2.0 * a;
        if r.abs() < best.residual {
            best = Run {
                a,
                iterations: it,
                residual: r.abs(),
                converged: false,
            };
        }
        if r.abs() < tol {
            best.converged = true;
            return best;
        }
        signs.push(r > 0.0);
        let n = signs.len();
        if lambda > 0.5 && n >= 3 && signs[n - 1] != signs[n - 2] && signs[n - 2] != signs[n - 3] {
            lambda = 0.5;
        }
        a = (1.0 - lambda) * a + lambda * tail / 2.0;
    }
    best.iterations = cfg.max_iter;
    best
}

fn starts(x: &EmpiricalDistribution, count: usize) -> Vec<f64> {
    let mut out = vec![x.mean() / 2.0];
    if let Some(pos) = x.positive_part() {
        for u in [0.5, 0.9, 0.25, 0.99] {
            if let Ok(q) = pos.quantile(u) {
                out.push(q / 2.0);
            }
        }
    }
    out.truncate(count.max(1));
    if count > 1 {
        out.extend(best_split(x));
    }
    out
}

/// Threshold `a = m / 2` of the best split into a zero cell and a tail
/// cell scored around its mean, by a linear scan over split points.
fn best_split(x: &EmpiricalDistribution) -> Option<f64> {
    let n = x.len();
    (1..n)
        .map(|j| {
            let tail = x.range_sums(j, n);
            let sse = tail.second - tail.first * tail.first / tail.mass;
            (j, x.range_sums(0, j).second + sse.max(0.0))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .and_then(|(j, _)| x.range_mean(j, n))
        .map(|m| m / 2.0)
}

/// Solves the two-point problem on the loss sample (profits clamped to zero).
///
/// Non-convergence is not an error: the best iterate comes back with
/// `converged = false`.
pub fn solve_two_point(dist: &EmpiricalDistribution, cfg: &SolverConfig) -> Result<Quantizer2> {
    cfg.validate()?;
    let x = dist.clamp_nonnegative();
    let found = x.clamped_support_size();
    if found < 2 {
        return Err(Error::SupportTooSmall { required: 2, found });
    }

    let mut runs: Vec<(Run, FixedPoint2)> = starts(&x, cfg.multistart)
        .into_iter()
        .map(|a0| {
            let run = iterate(&x, a0, cfg);
            let m = 2.0 * run.a;
            let fp = FixedPoint2 {
                a: run.a,
                m,
                p: x.mass_between(run.a, f64::INFINITY),
                distortion: distortion2(&x, m),
            };
            (run, fp)
        })
        .collect();
    runs.sort_by(|(ra, a), (rb, b)| {
        rb.converged
            .cmp(&ra.converged)
            .then(a.distortion.total_cmp(&b.distortion))
            .then(a.m.total_cmp(&b.m))
    });

    let mut fixed_points: Vec<FixedPoint2> = Vec::new();
    for (run, fp) in &runs {
        let dup = fixed_points
            .iter()
            .any(|q| (q.m - fp.m).abs() <= 1e-9 * fp.m.abs().max(1e-300));
        if run.converged && !dup {
            fixed_points.push(*fp);
        }
    }
    let (run, best) = &runs[0];
    Ok(Quantizer2 {
        m: best.m,
        p: best.p,
        a: best.a,
        distortion: best.distortion,
        iterations: run.iterations,
        residual: run.residual,
        converged: run.converged,
        fixed_points: if fixed_points.len() > 1 {
            fixed_points
        } else {
            Vec::new()
        },
    })
}
