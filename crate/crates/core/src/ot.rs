//! Entropic optimal transport (Sinkhorn–Knopp) and the transport route to
//! the three-point quantizer.
//!
//! `W_eps(p, q) = <C, Pi> + eps sum Pi (log Pi - 1)` over couplings of `p`
//! and `q`. The solver works with the log scalings `alpha = log u` and
//! `beta = log v`, so that `Pi = diag(u) K diag(v)` with `K = exp(-C / eps)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::SolverConfig;
use crate::de::de_minimize;
use crate::distribution::EmpiricalDistribution;
use crate::error::{Error, Result};
use crate::quantize3::{de_config, fast_distortion3, pinned_m1, polish, Method, Quantizer3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols` coupling.
    pub plan: Vec<f64>,
    /// `log u`.
    pub log_u: Vec<f64>,
    /// `log v`.
    pub log_v: Vec<f64>,
    pub epsilon: f64,
    /// `|Pi 1 - p|_1 + |Pi' 1 - q|_1`.
    pub marginal_violation: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `<C, Pi>`.
    pub linear_cost: f64,
    /// Regularized cost `W_eps`.
    pub cost: f64,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn u(&self) -> Vec<f64> {
        self.log_u.iter().map(|a| a.exp()).collect()
    }

    pub fn v(&self) -> Vec<f64> {
        self.log_v.iter().map(|b| b.exp()).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.plan.chunks(self.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Writes `row,col,mass` for every nonzero entry.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["row", "col", "mass"])
            .map_err(|e| Error::Io(e.to_string()))?;
        for (k, &v) in self.plan.iter().enumerate() {
            if v > 0.0 {
                w.serialize((k / self.cols, k % self.cols, v))
                    .map_err(|e| Error::Io(e.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One annealing stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub epsilon: f64,
    pub linear_cost: f64,
    pub iterations: usize,
    pub marginal_violation: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealedPlan {
    pub plan: TransportPlan,
    pub stages: Vec<StageSummary>,
    /// Stages whose linear cost exceeds that of the previous stage.
    pub monotonicity_violations: Vec<usize>,
}

fn validate(p: &[f64], q: &[f64], cost: &[Vec<f64>], epsilon: f64) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyInput);
    }
    if cost.len() != p.len() || cost.iter().any(|r| r.len() != q.len()) {
        return Err(Error::Dimension(format!(
            "cost must be {} x {} to match the marginals",
            p.len(),
            q.len()
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidConfig("cost entries must be finite".into()));
    }
    if p.iter().chain(q).any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidConfig("marginals must be nonnegative".into()));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon} must be positive")));
    }
    let (ps, qs): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if (ps - qs).abs() > 1e-9 {
        return Err(Error::MarginalMismatch { p_sum: ps, q_sum: qs });
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn finish(
    p: &[f64],
    q: &[f64],
    cost: &[Vec<f64>],
    epsilon: f64,
    plan: Vec<f64>,
    log_u: Vec<f64>,
    log_v: Vec<f64>,
    iterations: usize,
    tau: f64,
) -> TransportPlan {
    let m = q.len();
    let mut linear = 0.0;
    let mut entropy = 0.0;
    for (k, &v) in plan.iter().enumerate() {
        if v > 0.0 {
            linear += cost[k / m][k % m] * v;
            entropy += v * (v.ln() - 1.0);
        }
    }
    let mut out = TransportPlan {
        rows: p.len(),
        cols: m,
        plan,
        log_u,
        log_v,
        epsilon,
        marginal_violation: 0.0,
        iterations,
        converged: false,
        linear_cost: linear,
        cost: linear + epsilon * entropy,
    };
    out.marginal_violation = violation(&out, p, q);
    out.converged = out.marginal_violation <= tau;
    out
}

fn violation(plan: &TransportPlan, p: &[f64], q: &[f64]) -> f64 {
    let rows: f64 = plan.row_sums().iter().zip(p).map(|(r, p)| (r - p).abs()).sum();
    let cols: f64 = plan.col_sums().iter().zip(q).map(|(c, q)| (c - q).abs()).sum();
    if rows.is_nan() || cols.is_nan() {
        f64::INFINITY
    } else {
        rows + cols
    }
}

fn sinkhorn_direct(
    p: &[f64],
    q: &[f64],
    cost: &[Vec<f64>],
    epsilon: f64,
    tau: f64,
    max_iter: usize,
) -> TransportPlan {
    let (n, m) = (p.len(), q.len());
    let k: Vec<f64> = cost.iter().flatten().map(|c| (-c / epsilon).exp()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut plan = vec![0.0; n * m];
    let mut it = 0;
    while it < max_iter {
        it += 1;
        for i in 0..n {
            let kv: f64 = (0..m).map(|j| k[i * m + j] * v[j]).sum();
            u[i] = p[i] / kv;
        }
        for j in 0..m {
            let ku: f64 = (0..n).map(|i| k[i * m + j] * u[i]).sum();
            v[j] = q[j] / ku;
        }
        for i in 0..n {
            for j in 0..m {
                plan[i * m + j] = u[i] * k[i * m + j] * v[j];
            }
        }
        let rows: f64 = (0..n)
            .map(|i| (plan[i * m..(i + 1) * m].iter().sum::<f64>() - p[i]).abs())
            .sum();
        if rows <= tau || rows.is_nan() {
            break;
        }
    }
    let log_u = u.iter().map(|x| x.ln()).collect();
    let log_v = v.iter().map(|x| x.ln()).collect();
    finish(p, q, cost, epsilon, plan, log_u, log_v, it, tau)
}

fn sinkhorn_log(
    p: &[f64],
    q: &[f64],
    cost: &[Vec<f64>],
    epsilon: f64,
    tau: f64,
    max_iter: usize,
    init_beta: Option<&[f64]>,
    newton: bool,
) -> TransportPlan {
    let (n, m) = (p.len(), q.len());
    let scaled: Vec<f64> = cost.iter().flatten().map(|c| -c / epsilon).collect();
    let log_p: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let log_q: Vec<f64> = q.iter().map(|x| x.ln()).collect();
    let mut alpha = vec![0.0; n];
    let mut beta = init_beta.map_or_else(|| vec![0.0; m], <[f64]>::to_vec);
    let mut it = 0;
    if newton {
        it = newton_columns(&scaled, p, q, &mut beta, tau, max_iter);
    }
    while it < max_iter {
        it += 1;
        for i in 0..n {
            let row = &scaled[i * m..(i + 1) * m];
            alpha[i] = log_p[i] - log_sum_exp(row.iter().zip(&beta).map(|(s, b)| s + b));
        }
        for j in 0..m {
            let col = (0..n).map(|i| scaled[i * m + j] + alpha[i]);
            beta[j] = log_q[j] - log_sum_exp(col);
        }
        let rows: f64 = (0..n)
            .map(|i| {
                let r: f64 = (0..m)
                    .map(|j| (alpha[i] + scaled[i * m + j] + beta[j]).exp())
                    .sum();
                (r - p[i]).abs()
            })
            .sum();
        if rows <= tau || rows.is_nan() {
            break;
        }
    }
    let plan = (0..n * m)
        .map(|k| (alpha[k / m] + scaled[k] + beta[k % m]).exp())
        .collect();
    finish(p, q, cost, epsilon, plan, alpha, beta, it, tau)
}

/// Sinkhorn–Knopp scaling until the L1 marginal violation is at most `tau`.
///
/// Running out of iterations is reported through `converged = false`.
pub fn sinkhorn(
    p: &[f64],
    q: &[f64],
    cost: &[Vec<f64>],
    epsilon: f64,
    tau: f64,
    max_iter: usize,
    log_domain: bool,
) -> Result<TransportPlan> {
    validate(p, q, cost, epsilon)?;
    Ok(if log_domain {
        sinkhorn_log(p, q, cost, epsilon, tau, max_iter, None, false)
    } else {
        sinkhorn_direct(p, q, cost, epsilon, tau, max_iter)
    })
}

/// Row-wise softmax of `s_i + beta` and its log-normalizer.
fn row_softmax(row: &[f64], beta: &[f64], out: &mut [f64]) -> f64 {
    let lse = log_sum_exp(row.iter().zip(beta).map(|(s, b)| s + b));
    for ((o, s), b) in out.iter_mut().zip(row).zip(beta) {
        *o = (s + b - lse).exp();
    }
    lse
}

/// Newton steps on the column-marginal equations `sum_i p_i softmax_j(s_i + beta) = q_j`
/// (the gradient of the semi-dual), whose roots are the Sinkhorn column scalings. The first
/// column with positive mass is held fixed to remove the shift invariance.
/// Returns the number of Newton steps.
fn newton_columns(
    scaled: &[f64],
    p: &[f64],
    q: &[f64],
    beta: &mut [f64],
    tau: f64,
    max_steps: usize,
) -> usize {
    let m = q.len();
    let free: Vec<usize> = (0..m).filter(|&j| q[j] > 0.0).collect();
    for j in 0..m {
        if q[j] <= 0.0 {
            beta[j] = f64::NEG_INFINITY;
        }
    }
    if free.len() < 2 {
        return 0;
    }
    let dims = &free[1..];
    let k = dims.len();
    let mut pi = vec![0.0; m];
    let residual = |b: &[f64], pi: &mut [f64]| -> f64 {
        let mut col = vec![0.0; m];
        for (i, row) in scaled.chunks(m).enumerate() {
            if p[i] > 0.0 {
                row_softmax(row, b, pi);
                for j in 0..m {
                    col[j] += p[i] * pi[j];
                }
            }
        }
        col.iter().zip(q).map(|(c, q)| (c - q).abs()).sum()
    };
    let mut steps = 0;
    while steps < max_steps.min(200) {
        let mut col = vec![0.0; m];
        let mut jac = nalgebra::DMatrix::<f64>::zeros(k, k);
        for (i, row) in scaled.chunks(m).enumerate() {
            if p[i] <= 0.0 {
                continue;
            }
            row_softmax(row, beta, &mut pi);
            for j in 0..m {
                col[j] += p[i] * pi[j];
            }
            for (a, &ja) in dims.iter().enumerate() {
                let w = p[i] * pi[ja];
                if w == 0.0 {
                    continue;
                }
                jac[(a, a)] += w;
                for (b, &jb) in dims.iter().enumerate() {
                    jac[(a, b)] -= w * pi[jb];
                }
            }
        }
        let grad: Vec<f64> = (0..m).map(|j| q[j] - col[j]).collect();
        let norm: f64 = grad.iter().map(|g| g.abs()).sum();
        if norm <= tau / 4.0 {
            break;
        }
        steps += 1;
        let rhs = nalgebra::DVector::from_iterator(k, dims.iter().map(|&j| grad[j]));
        let ridge = 1e-14 * jac.trace().max(f64::MIN_POSITIVE);
        let step = (jac + nalgebra::DMatrix::identity(k, k) * ridge)
            .lu()
            .solve(&rhs);
        let Some(step) = step.filter(|d| d.iter().all(|x| x.is_finite())) else {
            break;
        };
        // Backtrack on the marginal residual; the dual objective itself is
        // too flat to rank nearby steps in floating point.
        let mut t = 1.0;
        let mut trial = beta.to_vec();
        let accepted = loop {
            for (a, &j) in dims.iter().enumerate() {
                trial[j] = beta[j] + t * step[a];
            }
            if residual(&trial, &mut pi) < norm {
                break true;
            }
            t /= 2.0;
            if t < 1e-12 {
                break false;
            }
        };
        if !accepted {
            break;
        }
        beta.copy_from_slice(&trial);
    }
    steps
}

/// Log-domain Sinkhorn along a decreasing `epsilons` schedule, warm-starting
/// each stage from the previous dual potential. Each stage first moves the
/// column potentials by Newton steps on the semi-dual, then runs ordinary
/// Sinkhorn sweeps until the marginal tolerance holds.
pub fn sinkhorn_annealed(
    p: &[f64],
    q: &[f64],
    cost: &[Vec<f64>],
    epsilons: &[f64],
    tau: f64,
    max_iter: usize,
) -> Result<AnnealedPlan> {
    let last = *epsilons.last().ok_or(Error::EmptyInput)?;
    for &e in epsilons {
        validate(p, q, cost, e)?;
    }
    let mut stages = Vec::with_capacity(epsilons.len());
    let mut violations = Vec::new();
    let mut beta: Option<Vec<f64>> = None;
    let mut plan = None;
    let mut prev_eps = last;
    for (s, &eps) in epsilons.iter().enumerate() {
        let warm: Option<Vec<f64>> = beta
            .as_ref()
            .map(|b: &Vec<f64>| b.iter().map(|x| x * prev_eps / eps).collect());
        let t = sinkhorn_log(p, q, cost, eps, tau, max_iter, warm.as_deref(), true);
        if let Some(prev) = stages.last().map(|st: &StageSummary| st.linear_cost) {
            if t.linear_cost > prev * (1.0 + 1e-12) + 1e-15 {
                violations.push(s);
            }
        }
        stages.push(StageSummary {
            epsilon: eps,
            linear_cost: t.linear_cost,
            iterations: t.iterations,
            marginal_violation: t.marginal_violation,
            converged: t.converged,
        });
        beta = Some(t.log_v.clone());
        prev_eps = eps;
        plan = Some(t);
    }
    Ok(AnnealedPlan {
        plan: plan.expect("schedule is nonempty"),
        stages,
        monotonicity_violations: violations,
    })
}

/// Atoms whose two smallest costs differ by less than this many `eps` are
/// handled exactly; elsewhere the soft minimum equals the hard one to
/// within `exp(-40)`.
const SOFT_WIDTH: f64 = 40.0;

fn soft_ranges(y: &EmpiricalDistribution, z1: f64, z2: f64, eps: f64) -> Vec<(usize, usize)> {
    let half = SOFT_WIDTH / 2.0 * eps;
    let window = |a: f64, gap: f64| {
        let w = if gap > 0.0 { half / gap } else { f64::INFINITY };
        let lo = if w.is_finite() { y.index_above(a - w) } else { 0 };
        let hi = if w.is_finite() { y.index_above(a + w) } else { y.len() };
        (lo.saturating_sub(1), (hi + 1).min(y.len()))
    };
    let r1 = window(z1 / 2.0, z1);
    let r2 = window((z1 + z2) / 2.0, z2 - z1);
    if r2.0 <= r1.1 {
        vec![(r1.0.min(r2.0), r1.1.max(r2.1))]
    } else {
        vec![r1, r2]
    }
}

fn costs(v: f64, z1: f64, z2: f64) -> [f64; 3] {
    [v * v, (v - z1).powi(2), (v - z2).powi(2)]
}

/// Hard cell of `v` under the lower-cell boundary convention.
fn hard_cell(v: f64, z1: f64, z2: f64) -> usize {
    if v <= z1 / 2.0 {
        0
    } else if v <= (z1 + z2) / 2.0 {
        1
    } else {
        2
    }
}

fn softmax(c: &[f64; 3], eps: f64) -> ([f64; 3], f64) {
    let m = c[0].min(c[1]).min(c[2]);
    let e = c.map(|cj| (-(cj - m) / eps).exp());
    let s: f64 = e.iter().sum();
    (e.map(|x| x / s), m - eps * s.ln())
}

/// `sum_i p_i softmin_eps(c_i0, c_i1, c_i2)`: the semi-relaxed entropic cost
/// minus the constant `eps sum p (log p - 1)`.
fn entropic_objective(y: &EmpiricalDistribution, z1: f64, z2: f64, eps: f64) -> f64 {
    let (z1, z2) = if z1 <= z2 { (z1, z2) } else { (z2, z1) };
    let mut total = fast_distortion3(y, z1, z2);
    for (lo, hi) in soft_ranges(y, z1, z2, eps) {
        for a in &y.atoms()[lo..hi] {
            let c = costs(a.value, z1, z2);
            let hard = c[0].min(c[1]).min(c[2]);
            total += a.weight * (softmax(&c, eps).1 - hard);
        }
    }
    total
}

/// Column sums of the semi-relaxed plan `Pi_ij = p_i softmax_j(-c_ij / eps)`.
fn plan_masses(y: &EmpiricalDistribution, z1: f64, z2: f64, eps: f64) -> [f64; 3] {
    let mut q = [0.0; 3];
    for a in y.atoms() {
        q[hard_cell(a.value, z1, z2)] += a.weight;
    }
    for (lo, hi) in soft_ranges(y, z1, z2, eps) {
        for a in &y.atoms()[lo..hi] {
            let c = costs(a.value, z1, z2);
            q[hard_cell(a.value, z1, z2)] -= a.weight;
            for (qj, s) in q.iter_mut().zip(softmax(&c, eps).0) {
                *qj += a.weight * s;
            }
        }
    }
    q.map(|x| x.max(0.0))
}

/// Full output of the transport route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtQuantization {
    pub quantizer: Quantizer3,
    /// Minimizer of `W_eps` before rounding the plan.
    pub entropic_optimum: [f64; 2],
    /// Column sums of the entropic plan at the smallest `eps`.
    pub plan_masses: [f64; 3],
    /// `W_eps` at the smallest `eps`, in squared loss units.
    pub w_epsilon: f64,
    /// Annealing diagnostics at the reported `(m1, m2)`; costs in squared loss units.
    pub stages: Vec<StageSummary>,
    pub monotonicity_violations: Vec<usize>,
    /// Final coupling between the standardized atoms and `{0, m1, m2}`.
    pub plan: TransportPlan,
}

/// Three-point quantizer from the entropic transport cost; see
/// [`quantize_via_ot_detailed`].
pub fn quantize_via_ot(
    dist: &EmpiricalDistribution,
    var_floor: Option<f64>,
    cfg: &SolverConfig,
) -> Result<Quantizer3> {
    quantize_via_ot_detailed(dist, var_floor, cfg).map(|o| o.quantizer)
}

/// Outer DE over `(m1, m2)` minimizing `W_eps` between the sample and a
/// measure on `{0, m1, m2}` whose masses are the column sums of the plan.
///
/// Losses are divided by `sd(X)` so that `eps` is a fraction of `Var(X)`.
/// The search runs at `ot_epsilon_min`; the full annealing schedule is then
/// replayed by log-domain Sinkhorn at the chosen point. The reported
/// codebook is the barycentric projection of the rounded plan, and the
/// reported masses are the Voronoi masses, as for the other solvers.
pub fn quantize_via_ot_detailed(
    dist: &EmpiricalDistribution,
    var_floor: Option<f64>,
    cfg: &SolverConfig,
) -> Result<OtQuantization> {
    cfg.validate()?;
    let x = dist.clamp_nonnegative();
    let found = x.clamped_support_size();
    if found < 3 {
        return Err(Error::SupportTooSmall { required: 3, found });
    }
    let worst = x.max();
    if let Some(floor) = var_floor {
        if !(floor < worst) {
            return Err(Error::InfeasibleFloor { floor, worst });
        }
    }
    let sd = x.variance().sqrt();
    let y = x.scaled(1.0 / sd)?;
    let eps = cfg.ot_epsilon_min;
    let top = y.max();
    let kappa = 1e6 * y.second_moment();
    let delta = 1e-9 * top;

    let search = |bounds: Vec<(f64, f64)>| {
        let de = de_config(cfg, bounds);
        de_minimize(
            |m| {
                let gap = (m[0] - m[1] + delta).max(0.0);
                entropic_objective(&y, m[0], m[1], eps) + kappa * gap * gap
            },
            &de,
        )
    };
    let mut res = search(vec![(0.0, top); 2])?;
    let mut z = (res.x_best[0], res.x_best[1]);
    let mut constrained_search = false;
    if let Some(floor) = var_floor {
        if z.1 * sd < floor {
            let f = floor / sd;
            let lo = (1e-12 * top).min(f / 2.0);
            res = search(vec![(lo, f), (f, top)])?;
            z = (res.x_best[0], res.x_best[1]);
            constrained_search = true;
        }
    }
    let entropic = [z.0 * sd, z.1 * sd];
    let (m1, m2) = round_plan(&x, entropic, var_floor.filter(|_| constrained_search), cfg);

    let masses = plan_masses(&y, z.0, z.1, eps);
    let w_std = entropic_objective(&y, z.0, z.1, eps)
        + eps
            * y.atoms()
                .iter()
                .map(|a| a.weight * (a.weight.ln() - 1.0))
                .sum::<f64>();

    let p: Vec<f64> = y.atoms().iter().map(|a| a.weight).collect();
    let cost: Vec<Vec<f64>> = y
        .atoms()
        .iter()
        .map(|a| costs(a.value, z.0, z.1).to_vec())
        .collect();
    let (p_adj, q_adj) = balance(&p, &masses);
    let annealed = sinkhorn_annealed(
        &p_adj,
        &q_adj,
        &cost,
        &cfg.epsilon_schedule(),
        cfg.ot_tau,
        cfg.ot_max_iter,
    )?;
    let var = sd * sd;
    let stages = annealed
        .stages
        .iter()
        .map(|s| StageSummary {
            epsilon: s.epsilon * var,
            linear_cost: s.linear_cost * var,
            ..s.clone()
        })
        .collect();

    let mut quantizer = Quantizer3::at(&x, m1, m2, Method::Ot);
    quantizer.iterations = res.generations_used;
    quantizer.converged = res.converged && m1 < m2;
    if let Some(floor) = var_floor {
        quantizer.constrained = true;
        quantizer.var_floor = Some(floor);
    }
    Ok(OtQuantization {
        quantizer,
        entropic_optimum: entropic,
        plan_masses: masses,
        w_epsilon: w_std * var,
        stages,
        monotonicity_violations: annealed.monotonicity_violations,
        plan: annealed.plan,
    })
}

/// Codebook of the hard (`eps -> 0`) rounding of the plan: each atom goes
/// to its nearest point and the points move to their cell means, repeated
/// until the cells stop changing. With an active floor `m2` stays pinned.
fn round_plan(
    x: &EmpiricalDistribution,
    entropic: [f64; 2],
    floor: Option<f64>,
    cfg: &SolverConfig,
) -> (f64, f64) {
    let [m1, m2] = entropic;
    match floor {
        None => polish(x, m1, m2, cfg).unwrap_or((m1, m2)),
        Some(f) => {
            let m1 = m1.min(f);
            let worst = x.max();
            let pinned = if m2 - f <= 1e-6 * (worst - f) {
                pinned_m1(x, m1, f, cfg).filter(|&p| p > 0.0 && p < f)
            } else {
                None
            };
            let rounded = match pinned {
                Some(p) => (p, f),
                None => polish(x, m1, m2, cfg)
                    .filter(|r| r.1 >= f)
                    .unwrap_or((m1, m2.max(f))),
            };
            if fast_distortion3(x, rounded.0, rounded.1) <= fast_distortion3(x, m1, m2.max(f)) * (1.0 + 1e-12) {
                rounded
            } else {
                (m1, m2.max(f))
            }
        }
    }
}

/// Rescales both marginals to unit mass so the balance check passes exactly.
fn balance(p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ps: f64 = p.iter().sum();
    let qs: f64 = q.iter().sum();
    (
        p.iter().map(|x| x / ps).collect(),
        q.iter().map(|x| x / qs).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize3::{criticality_check, solve_three_point};

    fn uniform_grid(n: usize) -> EmpiricalDistribution {
        let v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        EmpiricalDistribution::from_samples(&v).unwrap()
    }

    fn quadratic(x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|a| y.iter().map(|b| (a - b).powi(2)).collect())
            .collect()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn single_coupling() {
        for log_domain in [false, true] {
            let t = sinkhorn(&[1.0], &[1.0], &[vec![3.5]], 0.1, 1e-12, 100, log_domain).unwrap();
            assert!((t.get(0, 0) - 1.0).abs() < 1e-15);
            assert!((t.linear_cost - 3.5).abs() < 1e-15);
            assert!(t.converged);
        }
    }

    #[test]
    fn two_by_two_prefers_the_diagonal() {
        let c = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let t = sinkhorn(&[0.5, 0.5], &[0.5, 0.5], &c, 1e-3, 1e-12, 1000, true).unwrap();
        assert!((t.get(0, 0) - 0.5).abs() < 1e-9 && (t.get(1, 1) - 0.5).abs() < 1e-9);
        assert!(t.linear_cost < 1e-3);
    }

    #[test]
    fn mismatched_marginals_are_rejected() {
        let c = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(
            sinkhorn(&[0.5, 0.5], &[0.6, 0.5], &c, 0.1, 1e-9, 10, true),
            Err(Error::MarginalMismatch { .. })
        ));
        assert!(matches!(
            sinkhorn(&[0.5, 0.5], &[0.5, 0.5], &c[..1], 0.1, 1e-9, 10, true),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn log_and_direct_agree() {
        let x = [0.1, 0.4, 0.5, 0.9, 1.3];
        let y = [0.0, 0.7, 1.1];
        let p = [0.1, 0.3, 0.2, 0.25, 0.15];
        let q = [0.3, 0.3, 0.4];
        let c = quadratic(&x, &y);
        let a = sinkhorn(&p, &q, &c, 0.05, 1e-13, 10_000, false).unwrap();
        let b = sinkhorn(&p, &q, &c, 0.05, 1e-13, 10_000, true).unwrap();
        assert!(a.converged && b.converged);
        for (u, v) in a.plan.iter().zip(&b.plan) {
            assert!((u - v).abs() < 1e-8);
        }
        assert!((a.cost - b.cost).abs() < 1e-8);
    }

    #[test]
    fn plan_factorizes_through_scalings() {
        let x = [0.0, 0.3, 0.8, 1.0];
        let y = [0.2, 0.9];
        let c = quadratic(&x, &y);
        let eps = 0.2;
        let t = sinkhorn(&[0.25; 4], &[0.5, 0.5], &c, eps, 1e-12, 1000, true).unwrap();
        let (u, v) = (t.u(), t.v());
        for i in 0..4 {
            for j in 0..2 {
                let rebuilt = u[i] * (-c[i][j] / eps).exp() * v[j];
                assert!((rebuilt - t.get(i, j)).abs() <= 1e-10 * t.get(i, j));
            }
        }
        assert!(t.marginal_violation <= 1e-12);
    }

    #[test]
    fn annealed_plan_matches_brute_force_assignment() {
        let x = [0.0, 1.0, 2.5, 3.0, 4.2];
        let y = [0.5, 1.2, 2.0, 3.9, 5.0];
        let c = quadratic(&x, &y);
        let best = permutations(5)
            .into_iter()
            .min_by(|a, b| {
                let ca: f64 = a.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
                let cb: f64 = b.iter().enumerate().map(|(i, &j)| c[i][j]).sum();
                ca.total_cmp(&cb)
            })
            .unwrap();
        assert_eq!(best, vec![0, 1, 2, 3, 4]);
        let eps: Vec<f64> = crate::config::geometric_schedule(0.5, 1e-3, 6);
        let a = sinkhorn_annealed(&[0.2; 5], &[0.2; 5], &c, &eps, 1e-9, 10_000).unwrap();
        let tv: f64 = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| (a.plan.get(i, j) - if best[i] == j { 0.2 } else { 0.0 }).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 1e-3, "tv = {tv}");
        assert!(a.plan.marginal_violation <= 1e-9);
        assert!(a.monotonicity_violations.is_empty());
        assert!(a.stages.windows(2).all(|w| w[1].linear_cost <= w[0].linear_cost + 1e-12));
    }

    #[test]
    fn semi_relaxed_objective_matches_dense_evaluation() {
        let v: Vec<f64> = (0..400).map(|i| (f64::from(i) * 0.37).sin().abs() * 3.0).collect();
        let y = EmpiricalDistribution::from_samples(&v).unwrap();
        for eps in [1e-4, 1e-2, 0.3] {
            for (z1, z2) in [(0.8, 2.1), (1.5, 1.6), (0.05, 2.9)] {
                let dense: f64 = y
                    .atoms()
                    .iter()
                    .map(|a| a.weight * softmax(&costs(a.value, z1, z2), eps).1)
                    .sum();
                let fast = entropic_objective(&y, z1, z2, eps);
                assert!((fast - dense).abs() < 1e-12, "{eps} {z1} {z2}: {fast} vs {dense}");
                let q = plan_masses(&y, z1, z2, eps);
                let mut qd = [0.0; 3];
                for a in y.atoms() {
                    let s = softmax(&costs(a.value, z1, z2), eps).0;
                    for j in 0..3 {
                        qd[j] += a.weight * s[j];
                    }
                }
                for j in 0..3 {
                    assert!((q[j] - qd[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn exact_three_point_input() {
        let d = EmpiricalDistribution::from_weighted(&[(0.0, 0.5), (4.0, 0.3), (10.0, 0.2)]).unwrap();
        let q = quantize_via_ot(&d, None, &SolverConfig::default()).unwrap();
        assert!((q.m1 - 4.0).abs() < 1e-3 && (q.m2 - 10.0).abs() < 1e-3);
        assert!((q.p0 - 0.5).abs() < 1e-12 && (q.p1 - 0.3).abs() < 1e-12);
        assert_eq!(q.method, Method::Ot);
    }

    #[test]
    fn uniform_grid_solution() {
        let d = uniform_grid(100_000);
        let out = quantize_via_ot_detailed(&d, None, &SolverConfig::default()).unwrap();
        let q = &out.quantizer;
        assert!((q.m1 - 0.4).abs() < 1e-2 && (q.m2 - 0.8).abs() < 1e-2);
        assert!((q.p0 + q.p1 + q.p2 - 1.0).abs() < 1e-12);
        assert!(out.plan.marginal_violation <= 1e-9, "{}", out.plan.marginal_violation);
        assert!(out.monotonicity_violations.is_empty());
    }

    #[test]
    fn agrees_with_fixed_point_and_is_critical() {
        let v: Vec<f64> = (0..4000)
            .map(|i| (-(1.0 - (f64::from(i) + 0.5) / 4000.0).ln()).powf(1.3))
            .collect();
        let d = EmpiricalDistribution::from_samples(&v).unwrap();
        let cfg = SolverConfig::default();
        let fp = solve_three_point(&d, &cfg).unwrap();
        let ot = quantize_via_ot(&d, None, &cfg).unwrap();
        assert!((ot.m1 / fp.m1 - 1.0).abs() < 5e-3);
        assert!((ot.m2 / fp.m2 - 1.0).abs() < 5e-3);
        let r = criticality_check(&d, ot.m1, ot.m2, 64, 5);
        assert!(r.is_critical, "{}", r.min_directional_derivative);
    }

    #[test]
    fn floor_is_respected() {
        let d = uniform_grid(20_000);
        let q = quantize_via_ot(&d, Some(0.9), &SolverConfig::default()).unwrap();
        assert!(q.m2 >= 0.9 && q.constrained);
        assert!((q.m2 - 0.9).abs() < 1e-3 && (q.m1 - 0.45).abs() < 1e-2);
        assert!(matches!(
            quantize_via_ot(&d, Some(2.0), &SolverConfig::default()),
            Err(Error::InfeasibleFloor { .. })
        ));
    }

    #[test]
    fn plan_csv_lists_nonzero_entries() {
        let t = sinkhorn(&[0.5, 0.5], &[1.0], &[vec![0.0], vec![1.0]], 0.1, 1e-12, 10, true).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("row,col,mass"));
    }
}
