//! Three-point quantizer `{0, m1, m2}` with the zero knot pinned.
//!
//! Voronoi cells are `A0 = (-inf, a1]`, `A1 = (a1, a2]` and `A2 = (a2, inf)`
//! with `a1 = m1 / 2` and `a2 = (m1 + m2) / 2`. Atoms on a boundary belong to
//! the lower cell. Critical points satisfy `m1 = E[X | A1]`, `m2 = E[X | A2]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SolverConfig;
use crate::de::{de_minimize, DEConfig};
use crate::distribution::EmpiricalDistribution;
use crate::error::{Error, Result};

/// Solver that produced a [`Quantizer3`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FixedPoint,
    De,
    Ot,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::FixedPoint => "fixed-point",
            Method::De => "de",
            Method::Ot => "ot",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantizer3 {
    /// Moderate loss magnitude.
    pub m1: f64,
    /// Extreme loss magnitude.
    pub m2: f64,
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub a1: f64,
    pub a2: f64,
    pub distortion: f64,
    pub method: Method,
    pub constrained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var_floor: Option<f64>,
    /// `(E[X | A1] - m1, E[X | A2] - m2)` at the reported point; `None`
    /// for an empty cell.
    pub residuals: [Option<f64>; 2],
    pub iterations: usize,
    pub converged: bool,
    /// Distinct critical points `(m1, m2, distortion)` reached by multistart.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed_points: Vec<[f64; 3]>,
}

impl Quantizer3 {
    /// Assembles a report for `(m1, m2)` on the clamped sample `x`.
    pub(crate) fn at(x: &EmpiricalDistribution, m1: f64, m2: f64, method: Method) -> Self {
        let (p0, p1, p2) = masses(x, m1, m2);
        Self {
            m1,
            m2,
            p0,
            p1,
            p2,
            a1: m1 / 2.0,
            a2: (m1 + m2) / 2.0,
            distortion: distortion3(x, m1, m2).unwrap_or_else(|_| fast_distortion3(x, m1, m2)),
            method,
            constrained: false,
            var_floor: None,
            residuals: residuals(x, m1, m2),
            iterations: 0,
            converged: true,
            fixed_points: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedPointCheck {
    pub point: [f64; 2],
    pub witness: [f64; 2],
    pub derivative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalityReport {
    pub directions_tested: usize,
    pub min_directional_derivative: f64,
    /// Direction attaining the minimum.
    pub witness: [f64; 2],
    pub numeric_tol: f64,
    pub excluded_point_checks: Vec<ExcludedPointCheck>,
    pub is_critical: bool,
}

fn check_order(m1: f64, m2: f64) -> Result<()> {
    if m1 < m2 {
        Ok(())
    } else {
        Err(Error::Ordering { m1, m2 })
    }
}

/// `E[X^2 ^ (X - m1)^2 ^ (X - m2)^2]`, summed atom by atom.
pub fn distortion3(dist: &EmpiricalDistribution, m1: f64, m2: f64) -> Result<f64> {
    check_order(m1, m2)?;
    Ok(dist
        .atoms()
        .iter()
        .map(|a| {
            let x = a.value;
            a.weight * (x * x).min((x - m1).powi(2)).min((x - m2).powi(2))
        })
        .sum())
}

/// Distortion through the prefix sums, for a nonnegative sample and
/// `0 <= lo <= hi`.
pub(crate) fn fast_distortion3(x: &EmpiricalDistribution, lo: f64, hi: f64) -> f64 {
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let n = x.len();
    let i1 = x.index_above(lo / 2.0);
    let i2 = x.index_above((lo + hi) / 2.0).max(i1);
    x.range_sums(0, i1).second
        + x.range_sums(i1, i2).squared_deviation(lo)
        + x.range_sums(i2, n).squared_deviation(hi)
}

fn masses(x: &EmpiricalDistribution, m1: f64, m2: f64) -> (f64, f64, f64) {
    let a1 = m1 / 2.0;
    let a2 = (m1 + m2) / 2.0;
    let n = x.len();
    let i1 = x.index_above(a1);
    let i2 = x.index_above(a2).max(i1);
    (
        x.range_sums(0, i1).mass,
        x.range_sums(i1, i2).mass,
        x.range_sums(i2, n).mass,
    )
}

fn residuals(x: &EmpiricalDistribution, m1: f64, m2: f64) -> [Option<f64>; 2] {
    let a1 = m1 / 2.0;
    let a2 = (m1 + m2) / 2.0;
    let r1 = x.conditional_mean(a1, a2).ok().map(|c| c - m1);
    let r2 = x.conditional_mean(a2, f64::INFINITY).ok().map(|c| c - m2);
    [r1, r2]
}

/// Masses of the three Voronoi cells; boundary atoms go to the lower cell.
pub fn voronoi_probabilities(dist: &EmpiricalDistribution, m1: f64, m2: f64) -> Result<(f64, f64, f64)> {
    check_order(m1, m2)?;
    Ok(masses(dist, m1, m2))
}

fn support_check(x: &EmpiricalDistribution) -> Result<()> {
    let found = x.clamped_support_size();
    if found < 3 {
        return Err(Error::SupportTooSmall { required: 3, found });
    }
    Ok(())
}

const MAX_REPAIRS: usize = 50;

struct Run {
    m1: f64,
    m2: f64,
    iterations: usize,
    residual: f64,
    converged: bool,
    /// Set when the repair budget ran out or the ordering collapsed.
    failed: bool,
}

/// Alternating damped iteration from `(m1, m2)`.
fn iterate(x: &EmpiricalDistribution, mut m1: f64, mut m2: f64, cfg: &SolverConfig) -> Run {
    let tol = cfg.tol * x.mean();
    let mut lambda = cfg.damping;
    let mut repairs = 0;
    let mut signs: Vec<(bool, bool)> = Vec::new();
    let mut best = Run {
        m1,
        m2,
        iterations: 0,
        residual: f64::INFINITY,
        converged: false,
        failed: false,
    };
    for it in 1..=cfg.max_iter {
        if !(m1 > 0.0 && m1 < m2) {
            best.failed = true;
            return best;
        }
        let a1 = m1 / 2.0;
        let a2 = (m1 + m2) / 2.0;
        let i1 = x.index_above(a1);
        let i2 = x.index_above(a2).max(i1);
        let (Some(c1), Some(c2)) = (x.range_mean(i1, i2), x.range_mean(i2, x.len())) else {
            repairs += 1;
            if repairs > MAX_REPAIRS {
                best.failed = true;
                return best;
            }
            if i2 == x.len() {
                m2 = m1 + 0.9 * (m2 - m1);
            } else if x.mass_between(0.0, a1) > 0.0 {
                m1 *= 0.9;
            } else {
                m2 /= 0.9;
            }
            signs.clear();
            continue;
        };
        let r1 = c1 - m1;
        let r2 = c2 - m2;
        let r = r1.abs().max(r2.abs());
        if r < best.residual {
            best = Run {
                m1,
                m2,
                iterations: it,
                residual: r,
                converged: false,
                failed: false,
            };
        }
        if r < tol {
            best.converged = true;
            return best;
        }
        signs.push((r1 > 0.0, r2 > 0.0));
        let n = signs.len();
        if lambda > 0.5 && n >= 3 {
            let alt = |f: fn(&(bool, bool)) -> bool| {
                f(&signs[n - 1]) != f(&signs[n - 2]) && f(&signs[n - 2]) != f(&signs[n - 3])
            };
            if alt(|s| s.0) || alt(|s| s.1) {
                lambda = 0.5;
            }
        }

        m1 = (1.0 - lambda) * m1 + lambda * c1;
        let a2 = (m1 + m2) / 2.0;
        if let Ok(c2) = x.conditional_mean(a2, f64::INFINITY) {
            m2 = (1.0 - lambda) * m2 + lambda * c2;
        }
    }
    best.iterations = cfg.max_iter;
    best
}

fn starts(x: &EmpiricalDistribution, count: usize) -> Vec<(f64, f64)> {
    let pos = x.positive_part().expect("support check guarantees positive mass");
    let q = |u: f64| pos.quantile(u).expect("level inside (0, 1)");
    let mean = x.mean();
    let mut out = vec![(q(0.5), q(0.9)), (mean / 2.0, 2.0 * mean), (q(0.25), q(0.99))];
    out.truncate(count.max(1));
    if count > 1 {
        out.extend(best_partition(x));
    }
    for (m1, m2) in &mut out {
        if *m2 <= *m1 {
            *m2 = if *m1 < pos.max() { pos.max() } else { 2.0 * *m1 };
        }
    }
    out
}

/// Within-cell sum of squares of atoms `lo..hi` around their mean.
fn cell_sse(x: &EmpiricalDistribution, lo: usize, hi: usize) -> f64 {
    let s = x.range_sums(lo, hi);
    if s.mass > 0.0 {
        (s.second - s.first * s.first / s.mass).max(0.0)
    } else {
        0.0
    }
}

/// Cell means of the contiguous three-cell partition with the smallest
/// distortion, the zero cell being scored against 0.
///
/// For a fixed tail start `j`, the best middle start is nondecreasing in `j`
/// (the within-cell cost of sorted data is Monge), so divide and conquer
/// finds all of them in `O(n log n)`.
fn best_partition(x: &EmpiricalDistribution) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let head = |i: usize, j: usize| x.range_sums(0, i).second + cell_sse(x, i, j);
    let mut best_head = vec![(f64::INFINITY, 0usize); n];
    // (j range, i range) frames; the middle cell `i..j` is kept nonempty.
    let mut stack = vec![(1usize, n - 1, 0usize, n - 2)];
    while let Some((jlo, jhi, ilo, ihi)) = stack.pop() {
        if jlo > jhi {
            continue;
        }
        let j = (jlo + jhi) / 2;
        let mut arg = ilo;
        let mut val = f64::INFINITY;
        for i in ilo..=ihi.min(j - 1) {
            let v = head(i, j);
            if v < val {
                val = v;
                arg = i;
            }
        }
        best_head[j] = (val, arg);
        if j > jlo {
            stack.push((jlo, j - 1, ilo, arg));
        }
        stack.push((j + 1, jhi, arg, ihi));
    }
    let (j, _) = (1..n)
        .map(|j| (j, best_head[j].0 + cell_sse(x, j, n)))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    let i = best_head[j].1;
    let m1 = x.range_mean(i, j)?;
    let m2 = x.range_mean(j, n)?;
    (m1 > 0.0 && m1 < m2).then_some((m1, m2))
}

/// Runs the undamped fixed-point iteration from `(m1, m2)`; `None` unless it
/// converges.
pub(crate) fn polish(x: &EmpiricalDistribution, m1: f64, m2: f64, cfg: &SolverConfig) -> Option<(f64, f64)> {
    let cfg = SolverConfig {
        damping: 1.0,
        ..cfg.clone()
    };
    let run = iterate(x, m1, m2, &cfg);
    (run.converged && !run.failed).then_some((run.m1, run.m2))
}

fn by_distortion(a: &Quantizer3, b: &Quantizer3) -> std::cmp::Ordering {
    a.distortion
        .total_cmp(&b.distortion)
        .then(a.m1.total_cmp(&b.m1))
}

/// Fixed-point solver with multistart. Falls back to [`solve_three_point_de`]
/// when every start exhausts its empty-cell repairs.
pub fn solve_three_point(dist: &EmpiricalDistribution, cfg: &SolverConfig) -> Result<Quantizer3> {
    cfg.validate()?;
    let x = dist.clamp_nonnegative();
    support_check(&x)?;

    let runs: Vec<Run> = starts(&x, cfg.multistart)
        .into_par_iter()
        .map(|(m1, m2)| iterate(&x, m1, m2, cfg))
        .collect();
    let mut candidates: Vec<(bool, Quantizer3)> = runs
        .iter()
        .filter(|r| !r.failed)
        .map(|r| {
            let mut q = Quantizer3::at(&x, r.m1, r.m2, Method::FixedPoint);
            q.iterations = r.iterations;
            q.converged = r.converged;
            (r.converged, q)
        })
        .collect();
    if candidates.is_empty() {
        return solve_three_point_de(dist, cfg);
    }
    candidates.sort_by(|(ca, a), (cb, b)| cb.cmp(ca).then(by_distortion(a, b)));

    let mut fixed_points: Vec<[f64; 3]> = Vec::new();
    for (converged, q) in &candidates {
        let dup = fixed_points
            .iter()
            .any(|p| (p[0] - q.m1).abs() <= 1e-9 * q.m1 && (p[1] - q.m2).abs() <= 1e-9 * q.m2);
        if *converged && !dup {
            fixed_points.push([q.m1, q.m2, q.distortion]);
        }
    }
    let mut best = candidates.swap_remove(0).1;
    if fixed_points.len() > 1 {
        best.fixed_points = fixed_points;
    }
    Ok(best)
}

/// Builds the DE settings from the solver configuration.
pub(crate) fn de_config(cfg: &SolverConfig, bounds: Vec<(f64, f64)>) -> DEConfig {
    let mut de = DEConfig::new(bounds);
    if let Some(np) = cfg.de_population {
        de.population_size = np;
    }
    de.mutation_factor = cfg.de_mutation;
    de.crossover_rate = cfg.de_crossover;
    de.max_generations = cfg.de_max_generations;
    de.rel_tol = cfg.de_rel_tol;
    de.patience = cfg.de_patience;
    de.seed = cfg.seed;
    de
}

/// Distortion plus the quadratic ordering penalty `kappa max(0, m1 - m2 + delta)^2`.
pub(crate) fn penalized(x: &EmpiricalDistribution, m: &[f64], kappa: f64, delta: f64) -> f64 {
    let gap = (m[0] - m[1] + delta).max(0.0);
    fast_distortion3(x, m[0], m[1]) + kappa * gap * gap
}

/// Global minimization of the distortion over `[0, max X]^2` by DE.
pub fn solve_three_point_de(dist: &EmpiricalDistribution, cfg: &SolverConfig) -> Result<Quantizer3> {
    cfg.validate()?;
    let x = dist.clamp_nonnegative();
    support_check(&x)?;
    let top = x.max();
    let kappa = 1e6 * x.second_moment();
    let delta = 1e-9 * top;
    let de = de_config(cfg, vec![(0.0, top); 2]);
    let res = de_minimize(|m| penalized(&x, m, kappa, delta), &de)?;
    let (m1, m2) = (res.x_best[0], res.x_best[1]);
    let mut q = Quantizer3::at(&x, m1, m2, Method::De);
    q.iterations = res.generations_used;
    q.converged = res.converged && m1 < m2;
    Ok(q)
}

/// 1-D iteration `m1 = E[X | m1/2 < X <= (m1 + m2)/2]` with `m2` held fixed.
pub(crate) fn pinned_m1(x: &EmpiricalDistribution, mut m1: f64, m2: f64, cfg: &SolverConfig) -> Option<f64> {
    let tol = cfg.tol * x.mean();
    for _ in 0..cfg.max_iter {
        let c = x.conditional_mean(m1 / 2.0, (m1 + m2) / 2.0).ok()?;
        if (c - m1).abs() < tol {
            return Some(c);
        }
        m1 = c;
    }
    None
}

/// Minimizes the distortion subject to `m2 >= var_floor`.
///
/// An unconstrained solution that already respects the floor is returned as
/// is. Otherwise DE searches `m1 in (0, floor]`, `m2 in [floor, max X]`; when
/// the floor binds, the result is pinned to `m2 = floor` and `m1` is refined
/// by the one-dimensional fixed point.
pub fn solve_three_point_constrained(
    dist: &EmpiricalDistribution,
    var_floor: f64,
    cfg: &SolverConfig,
) -> Result<Quantizer3> {
    solve_three_point_constrained_with(dist, var_floor, Method::FixedPoint, cfg)
}

/// As [`solve_three_point_constrained`], with `method` choosing the
/// unconstrained solver that is tried first. `Method::Ot` delegates to the
/// transport route with the floor.
pub fn solve_three_point_constrained_with(
    dist: &EmpiricalDistribution,
    var_floor: f64,
    method: Method,
    cfg: &SolverConfig,
) -> Result<Quantizer3> {
    if method == Method::Ot {
        return crate::ot::quantize_via_ot(dist, Some(var_floor), cfg);
    }
    cfg.validate()?;
    let x = dist.clamp_nonnegative();
    support_check(&x)?;
    let worst = x.max();
    if !(var_floor < worst) {
        return Err(Error::InfeasibleFloor {
            floor: var_floor,
            worst,
        });
    }
    let free = match method {
        Method::De => solve_three_point_de(dist, cfg)?,
        _ => solve_three_point(dist, cfg)?,
    };
    if free.m2 >= var_floor {
        return Ok(Quantizer3 {
            constrained: true,
            var_floor: Some(var_floor),
            ..free
        });
    }

    let kappa = 1e6 * x.second_moment();
    let delta = 1e-9 * worst;
    let lo = (1e-12 * worst).min(var_floor / 2.0);
    let de = de_config(cfg, vec![(lo, var_floor), (var_floor, worst)]);
    let res = de_minimize(|m| penalized(&x, m, kappa, delta), &de)?;
    let (mut m1, mut m2) = (res.x_best[0], res.x_best[1]);
    let mut distortion = fast_distortion3(&x, m1, m2);

    if m2 - var_floor <= 1e-6 * (worst - var_floor) {
        if let Some(p) = pinned_m1(&x, m1, var_floor, cfg).filter(|&p| p > 0.0 && p < var_floor) {
            let d = fast_distortion3(&x, p, var_floor);
            if d <= distortion * (1.0 + 1e-12) {
                m1 = p;
                m2 = var_floor;
                distortion = d;
            }
        }
    }
    let mut q = Quantizer3::at(&x, m1, m2, Method::De);
    q.distortion = distortion;
    q.iterations = res.generations_used;
    q.converged = res.converged;
    q.constrained = true;
    q.var_floor = Some(var_floor);
    Ok(q)
}

/// Per-atom B-derivative of `H = min(h0, h1, h2)` at `(x1, x2)` along `v`.
fn atom_derivative(value: f64, x1: f64, x2: f64, v: [f64; 2]) -> f64 {
    let h = [value * value, (value - x1).powi(2), (value - x2).powi(2)];
    let g = [0.0, -2.0 * (value - x1) * v[0], -2.0 * (value - x2) * v[1]];
    let hmin = h[0].min(h[1]).min(h[2]);
    let tie = 1e-12 * (value * value + x1 * x1 + x2 * x2);
    (0..3)
        .filter(|&j| h[j] - hmin <= tie)
        .map(|j| g[j])
        .fold(f64::INFINITY, f64::min)
}

/// Empirical expectation of the B-derivative of the distortion.
pub fn directional_derivative(dist: &EmpiricalDistribution, x1: f64, x2: f64, v: [f64; 2]) -> f64 {
    dist.atoms()
        .iter()
        .map(|a| a.weight * atom_derivative(a.value, x1, x2, v))
        .sum()
}

fn directions(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = vec![
        [1.0, 0.0],
        [-1.0, 0.0],
        [0.0, 1.0],
        [0.0, -1.0],
        [r, r],
        [-r, -r],
        [r, -r],
        [-r, r],
    ];
    out.truncate(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < n {
        let t = rng.random::<f64>() * std::f64::consts::TAU;
        out.push([t.cos(), t.sin()]);
    }
    out
}

fn steepest(dist: &EmpiricalDistribution, x1: f64, x2: f64, dirs: &[[f64; 2]]) -> ([f64; 2], f64) {
    dirs.iter()
        .map(|&v| (v, directional_derivative(dist, x1, x2, v)))
        .fold(([0.0, 0.0], f64::INFINITY), |acc, d| if d.1 < acc.1 { d } else { acc })
}

/// Checks criticality at `(m1, m2)` with tolerance `1e-6 E[X^2]`.
pub fn criticality_check(
    dist: &EmpiricalDistribution,
    m1: f64,
    m2: f64,
    n_directions: usize,
    rng_seed: u64,
) -> CriticalityReport {
    let tol = 1e-6 * dist.clamp_nonnegative().second_moment();
    criticality_check_with_tol(dist, m1, m2, n_directions, rng_seed, tol)
}

/// [`criticality_check`] with an explicit tolerance.
///
/// Besides `(m1, m2)`, probes the non-critical configurations at sample scale
/// `M = max X`: `(0,0)`, `(0,2M)`, `(2M,0)`, `(2M,2M)`, `(0,3M)`, `(3M,0)`.
pub fn criticality_check_with_tol(
    dist: &EmpiricalDistribution,
    m1: f64,
    m2: f64,
    n_directions: usize,
    rng_seed: u64,
    numeric_tol: f64,
) -> CriticalityReport {
    let x = dist.clamp_nonnegative();
    let dirs = directions(n_directions, rng_seed);
    let (witness, min) = steepest(&x, m1, m2, &dirs);
    let big = x.max();
    let probes = [
        [0.0, 0.0],
        [0.0, 2.0 * big],
        [2.0 * big, 0.0],
        [2.0 * big, 2.0 * big],
        [0.0, 3.0 * big],
        [3.0 * big, 0.0],
    ];
    let excluded_point_checks = probes
        .iter()
        .map(|&point| {
            let (witness, derivative) = steepest(&x, point[0], point[1], &dirs);
            ExcludedPointCheck {
                point,
                witness,
                derivative,
            }
        })
        .collect();
    CriticalityReport {
        directions_tested: dirs.len(),
        min_directional_derivative: min,
        witness,
        numeric_tol,
        excluded_point_checks,
        is_critical: min >= -numeric_tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize2::{distortion2, solve_two_point};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig};

    fn three_atoms() -> EmpiricalDistribution {
        EmpiricalDistribution::from_weighted(&[(0.0, 0.5), (4.0, 0.3), (10.0, 0.2)]).unwrap()
    }

    fn uniform_grid(n: usize) -> EmpiricalDistribution {
        let v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        EmpiricalDistribution::from_samples(&v).unwrap()
    }

    fn exponential_grid(n: usize) -> EmpiricalDistribution {
        let v: Vec<f64> = (0..n)
            .map(|i| -(1.0 - (i as f64 + 0.5) / n as f64).ln())
            .collect();
        EmpiricalDistribution::from_samples(&v).unwrap()
    }

    fn golden(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..60 {
            let c = hi - g * (hi - lo);
            let d = lo + g * (hi - lo);
            if f(c) < f(d) {
                hi = d;
            } else {
                lo = c;
            }
        }
        (lo + hi) / 2.0
    }

    #[test]
    fn distortion_examples() {
        let d = three_atoms();
        assert_eq!(distortion3(&d, 4.0, 10.0).unwrap(), 0.0);
        assert!((distortion3(&d, 4.0, 9.0).unwrap() - 0.2).abs() < 1e-12);
        let e = exponential_grid(1000);
        let m = 2.5 * e.max();
        assert!((distortion3(&e, m, m + 1.0).unwrap() - e.second_moment()).abs() < 1e-12);
        assert_eq!(
            distortion3(&d, 5.0, 5.0),
            Err(Error::Ordering { m1: 5.0, m2: 5.0 })
        );
    }

    #[test]
    fn fast_distortion_matches_direct_sum() {
        let e = exponential_grid(5000);
        for (m1, m2) in [(0.3, 1.0), (1.1, 3.7), (0.01, 9.0), (2.0, 2.1)] {
            let slow = distortion3(&e, m1, m2).unwrap();
            assert!((fast_distortion3(&e, m1, m2) - slow).abs() < 1e-12 * e.second_moment());
        }
    }

    #[test]
    fn voronoi_examples() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        let d = EmpiricalDistribution::from_samples(&v).unwrap();
        let (p0, p1, p2) = voronoi_probabilities(&d, 4.0, 8.0).unwrap();
        assert!((p0 - 0.2).abs() < 1e-15 && (p1 - 0.4).abs() < 1e-15 && (p2 - 0.4).abs() < 1e-15);
        // atom 3 sits exactly on a1 = 3 and stays in the zero cell
        let (p0, _, _) = voronoi_probabilities(&d, 6.0, 8.0).unwrap();
        assert!((p0 - 0.3).abs() < 1e-15);
        let (p0, p1, p2) = voronoi_probabilities(&uniform_grid(100_000), 0.4, 0.8).unwrap();
        assert!((p0 - 0.2).abs() < 1e-4 && (p1 - 0.4).abs() < 1e-4 && (p2 - 0.4).abs() < 1e-4);
        assert!(voronoi_probabilities(&d, 8.0, 4.0).is_err());
    }

    #[test]
    fn exact_three_point_input() {
        let q = solve_three_point(&three_atoms(), &SolverConfig::default()).unwrap();
        assert!(q.converged);
        assert_eq!((q.m1, q.m2), (4.0, 10.0));
        assert!((q.p0 - 0.5).abs() < 1e-15 && (q.p1 - 0.3).abs() < 1e-15);
        assert!((q.p2 - 0.2).abs() < 1e-15);
        assert_eq!(q.distortion, 0.0);
        assert_eq!(q.method, Method::FixedPoint);
    }

    #[test]
    fn uniform_solution() {
        let q = solve_three_point(&uniform_grid(100_000), &SolverConfig::default()).unwrap();
        assert!(q.converged);
        for (got, want) in [(q.m1, 0.4), (q.m2, 0.8), (q.p0, 0.2), (q.p1, 0.4), (q.p2, 0.4)] {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
        assert!((q.p0 + q.p1 + q.p2 - 1.0).abs() < 1e-12);
        assert_eq!(q.a1, q.m1 / 2.0);
        assert_eq!(q.a2, (q.m1 + q.m2) / 2.0);
    }

    #[test]
    fn exponential_matches_golden_section_oracle() {
        let e = exponential_grid(20_000);
        // Nested golden section on the exact distortion: outer over m2,
        // inner over m1 in (0, m2).
        let inner = |m2: f64| {
            let m1 = golden(|m1| distortion3(&e, m1, m2).unwrap(), 1e-9, m2 - 1e-9);
            (m1, distortion3(&e, m1, m2).unwrap())
        };
        let m2 = golden(|m2| inner(m2).1, 0.5, 8.0);
        let m1 = inner(m2).0;
        let q = solve_three_point(&e, &SolverConfig::default()).unwrap();
        assert!((q.m1 - m1).abs() < 1e-3, "{} vs {m1}", q.m1);
        assert!((q.m2 - m2).abs() < 1e-3, "{} vs {m2}", q.m2);
    }

    #[test]
    fn solution_is_a_local_minimum() {
        let e = exponential_grid(20_000);
        let cfg = SolverConfig::default();
        let q = solve_three_point(&e, &cfg).unwrap();
        assert!(q.residuals[0].unwrap().abs() < cfg.tol * e.mean());
        assert!(q.residuals[1].unwrap().abs() < cfg.tol * e.mean());
        for f1 in [0.98, 1.0, 1.02] {
            for f2 in [0.98, 1.0, 1.02] {
                let d = distortion3(&e, q.m1 * f1, q.m2 * f2).unwrap();
                assert!(q.distortion <= d + 1e-15);
            }
        }
    }

    #[test]
    fn richer_codebook_never_hurts() {
        let e = exponential_grid(10_000);
        let cfg = SolverConfig::default();
        let q3 = solve_three_point(&e, &cfg).unwrap();
        let q2 = solve_two_point(&e, &cfg).unwrap();
        assert!(q3.distortion <= distortion2(&e, q2.m));
    }

    #[test]
    fn partition_search_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v: Vec<f64> = (0..60).map(|_| (rng.random::<f64>() * 4.0).exp()).collect();
            let d = EmpiricalDistribution::from_samples(&v).unwrap();
            let n = d.len();
            let mut brute = f64::INFINITY;
            for j in 1..n {
                for i in 0..j {
                    let c = d.range_sums(0, i).second + cell_sse(&d, i, j) + cell_sse(&d, j, n);
                    brute = brute.min(c);
                }
            }
            let (m1, m2) = best_partition(&d).unwrap();
            let got = distortion3(&d, m1, m2).unwrap();
            assert!(got <= brute * (1.0 + 1e-12), "{got} vs {brute}");
        }
    }

    #[test]
    fn de_recovers_exact_input() {
        let q = solve_three_point_de(&three_atoms(), &SolverConfig::default()).unwrap();
        assert!((q.m1 - 4.0).abs() < 1e-4 && (q.m2 - 10.0).abs() < 1e-4);
        assert!(q.distortion < 1e-8);
        assert_eq!(q.method, Method::De);
    }

    #[test]
    fn de_matches_fixed_point_on_uniform() {
        let d = uniform_grid(100_000);
        let q = solve_three_point_de(&d, &SolverConfig::default()).unwrap();
        assert!((q.m1 - 0.4).abs() < 1e-3 && (q.m2 - 0.8).abs() < 1e-3);
    }

    #[test]
    fn constrained_floor_below_solution_is_inactive() {
        let d = uniform_grid(100_000);
        let cfg = SolverConfig::default();
        let free = solve_three_point(&d, &cfg).unwrap();
        let q = solve_three_point_constrained(&d, 0.5, &cfg).unwrap();
        assert_eq!((q.m1, q.m2), (free.m1, free.m2));
        assert!(q.constrained);
        assert_eq!(q.var_floor, Some(0.5));
    }

    #[test]
    fn constrained_floor_binds() {
        let d = uniform_grid(20_000);
        let q = solve_three_point_constrained(&d, 0.9, &SolverConfig::default()).unwrap();
        assert_eq!(q.m2, 0.9);
        // dense grid over m1 with m2 pinned at the floor
        let best = (1..9000)
            .map(|i| f64::from(i) * 1e-4)
            .map(|m1| (m1, distortion3(&d, m1, 0.9).unwrap()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!((q.m1 - best.0).abs() < 2e-4, "{} vs {}", q.m1, best.0);
        assert!((q.m1 - 0.45).abs() < 1e-3);
        assert!(q.distortion <= best.1 + 1e-12);
    }

    #[test]
    fn infeasible_floor() {
        let d = three_atoms();
        assert_eq!(
            solve_three_point_constrained(&d, 10.0, &SolverConfig::default()),
            Err(Error::InfeasibleFloor {
                floor: 10.0,
                worst: 10.0
            })
        );
    }

    #[test]
    fn support_guard() {
        let d = EmpiricalDistribution::from_samples(&[-1.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(
            solve_three_point(&d, &SolverConfig::default()),
            Err(Error::SupportTooSmall { required: 3, found: 2 })
        );
    }

    #[test]
    fn criticality_at_exact_solution() {
        let r = criticality_check(&three_atoms(), 4.0, 10.0, 64, 1);
        assert!(r.min_directional_derivative >= -1e-9);
        assert!(r.is_critical);
        assert_eq!(r.directions_tested, 64);
        assert!(r.excluded_point_checks.iter().all(|c| c.derivative < 0.0));
    }

    #[test]
    fn origin_is_not_critical_for_a_point_mass() {
        let d = EmpiricalDistribution::from_samples(&[2.0]).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let v = directional_derivative(&d, 0.0, 0.0, [r, r]);
        assert!((v - (-4.0 * r)).abs() < 1e-12);
        for w in [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5], [0.3, -2.0]] {
            let expect = 0f64.min(-4.0 * w[0]).min(-4.0 * w[1]);
            assert!((directional_derivative(&d, 0.0, 0.0, w) - expect).abs() < 1e-12);
        }
        let rep = criticality_check(&d, 1.0, 3.0, 16, 0);
        assert!(rep.excluded_point_checks[0].derivative < 0.0);
    }

    #[test]
    fn non_optimal_point_has_witness() {
        let d = uniform_grid(10_000);
        let (m1, m2) = (0.3, 0.7);
        let r = criticality_check(&d, m1, m2, 64, 7);
        assert!(!r.is_critical);
        let h = 1e-7;
        let [v1, v2] = r.witness;
        let fd = (distortion3(&d, m1 + h * v1, m2 + h * v2).unwrap()
            - distortion3(&d, m1 - h * v1, m2 - h * v2).unwrap())
            / (2.0 * h);
        assert!(fd < 0.0);
        assert!((fd - r.min_directional_derivative).abs() < 1e-6 * fd.abs());
    }

    #[test]
    fn smooth_branch_matches_finite_differences() {
        let e = exponential_grid(3000);
        let (m1, m2) = (0.731, 2.417);
        for v in directions(16, 3) {
            let h = 1e-7;
            let fd = (distortion3(&e, m1 + h * v[0], m2 + h * v[1]).unwrap()
                - distortion3(&e, m1 - h * v[0], m2 - h * v[1]).unwrap())
                / (2.0 * h);
            let bd = directional_derivative(&e, m1, m2, v);
            assert!((fd - bd).abs() <= 1e-6 * bd.abs().max(1e-3), "{fd} vs {bd}");
        }
    }

    #[test]
    fn solvers_report_critical_points() {
        let e = exponential_grid(10_000);
        let cfg = SolverConfig::default();
        for q in [solve_three_point(&e, &cfg).unwrap(), solve_three_point_de(&e, &cfg).unwrap()] {
            let r = criticality_check(&e, q.m1, q.m2, 64, 11);
            assert!(r.is_critical, "{}: {}", q.method, r.min_directional_derivative);
        }
    }

    #[test]
    fn method_serializes_as_tag() {
        let q = Quantizer3::at(&three_atoms(), 4.0, 10.0, Method::FixedPoint);
        let s = serde_json::to_string(&q).unwrap();
        assert!(s.contains(r#""method":"fixed-point""#));
        assert!(!s.contains("var_floor"));
        let back: Quantizer3 = serde_json::from_str(&s).unwrap();
        assert_eq!(back, q);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn scaling_equivariance(
            values in prop::collection::vec(0.0f64..100.0, 20..200),
            c in prop::sample::select(vec![0.5, 3.0, 0.125, 8.0]),
        ) {
            let d = EmpiricalDistribution::from_samples(&values).unwrap();
            prop_assume!(d.clamped_support_size() >= 3);
            let cfg = SolverConfig::default();
            let q = solve_three_point(&d, &cfg).unwrap();
            prop_assume!(q.method == Method::FixedPoint && q.converged);
            let s = solve_three_point(&d.scaled(c).unwrap(), &cfg).unwrap();
            prop_assert!((s.m1 - c * q.m1).abs() <= 1e-9 * c * q.m2);
            prop_assert!((s.m2 - c * q.m2).abs() <= 1e-9 * c * q.m2);
            prop_assert_eq!((s.p0, s.p1, s.p2), (q.p0, q.p1, q.p2));
        }

        #[test]
        fn masses_are_normalized(
            values in prop::collection::vec(-10.0f64..100.0, 3..300),
            m1 in 0.01f64..50.0,
            gap in 0.01f64..80.0,
        ) {
            let d = EmpiricalDistribution::from_samples(&values).unwrap();
            let (p0, p1, p2) = voronoi_probabilities(&d, m1, m1 + gap).unwrap();
            prop_assert!((p0 + p1 + p2 - 1.0).abs() < 1e-12);
            prop_assert!(p0 >= 0.0 && p1 >= 0.0 && p2 >= 0.0);
        }
    }
}
