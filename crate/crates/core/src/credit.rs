//! Default-risk engines for a trading-book credit portfolio.
//!
//! Two loss models share one portfolio type:
//!
//! * a multi-factor Merton model simulated by Monte Carlo, where obligor `n`
//!   defaults when `dX_n = beta_n . W + sigma_n eps_n <= Phi^-1(PD_n)` and
//!   `sigma_n = sqrt(1 - beta_n' Sigma beta_n)` gives `dX_n` unit variance;
//! * a one-factor Gaussian copula whose full loss law is enumerated over all
//!   `2^N` default configurations, with each configuration probability
//!   integrated against the common factor by Gauss–Hermite quadrature.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::distribution::{csv_err, read_table, Neumaier};
use crate::error::{Error, Result};

/// Largest portfolio the exact enumerator accepts.
pub const MAX_EXACT_OBLIGORS: usize = 26;
/// Smallest accepted Gauss–Hermite order.
pub const MIN_QUAD_ORDER: usize = 8;
pub const DEFAULT_QUAD_ORDER: usize = 64;

/// Slack on cumulative probabilities when locating a quantile.
const LEVEL_SLACK: f64 = 1e-12;
/// Tolerated negative eigenvalue of a factor correlation matrix.
const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obligor {
    /// Exposure at default, in currency.
    pub ead: f64,
    /// Loss given default as a fraction of `ead`.
    pub lgd: f64,
    /// One-year default probability.
    pub pd: f64,
}

impl Obligor {
    pub fn loss_given_default(&self) -> f64 {
        self.ead * self.lgd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Dependence {
    /// Per-obligor loadings on `K` correlated standard normal factors.
    MultiFactor {
        loadings: Vec<Vec<f64>>,
        factor_correlation: Vec<Vec<f64>>,
    },
    /// `Z_n = sqrt(rho_n) U + sqrt(1 - rho_n) eps_n`.
    OneFactor { rho: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditPortfolio {
    pub obligors: Vec<Obligor>,
    pub dependence: Dependence,
}

/// Ready-to-simulate form: `dX_n = c_n . z + sigma_n eps_n` with `z` iid
/// standard normal.
struct FactorModel {
    exposures: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    thresholds: Vec<f64>,
    losses: Vec<f64>,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// `Phi^-1(pd)`, with the endpoints mapped to infinities.
///
/// Two Newton steps on `Phi(b) = pd` polish the library inverse, which
/// round-trips only to about 1e-11.
fn default_threshold(pd: f64) -> f64 {
    if pd <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if pd >= 1.0 {
        return f64::INFINITY;
    }
    let phi = std_normal();
    let mut b = phi.inverse_cdf(pd);
    for _ in 0..2 {
        let density = phi.pdf(b);
        if density > 0.0 {
            b -= if pd < 0.5 {
                (phi.cdf(b) - pd) / density
            } else {
                (1.0 - pd - phi.sf(b)) / density
            };
        }
    }
    b
}

impl CreditPortfolio {
    pub fn one_factor(obligors: Vec<Obligor>, rho: Vec<f64>) -> Result<Self> {
        let p = Self {
            obligors,
            dependence: Dependence::OneFactor { rho },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn multi_factor(
        obligors: Vec<Obligor>,
        loadings: Vec<Vec<f64>>,
        factor_correlation: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let p = Self {
            obligors,
            dependence: Dependence::MultiFactor {
                loadings,
                factor_correlation,
            },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.obligors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obligors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPortfolio(msg));
        if self.obligors.is_empty() {
            return bad("no obligors".into());
        }
        for (i, o) in self.obligors.iter().enumerate() {
            if !(o.ead.is_finite() && o.ead >= 0.0) {
                return bad(format!("obligor {}: ead {} must be finite and >= 0", i + 1, o.ead));
            }
            if !(0.0..=1.0).contains(&o.lgd) {
                return bad(format!("obligor {}: lgd {} outside [0, 1]", i + 1, o.lgd));
            }
            if !(0.0..=1.0).contains(&o.pd) {
                return bad(format!("obligor {}: pd {} outside [0, 1]", i + 1, o.pd));
            }
        }
        let n = self.obligors.len();
        match &self.dependence {
            Dependence::OneFactor { rho } => {
                if rho.len() != n {
                    return bad(format!("{} correlations for {n} obligors", rho.len()));
                }
                if let Some((i, r)) = rho.iter().enumerate().find(|(_, r)| !(0.0..1.0).contains(*r)) {
                    return bad(format!("obligor {}: rho {r} outside [0, 1)", i + 1));
                }
            }
            Dependence::MultiFactor {
                loadings,
                factor_correlation,
            } => {
                if loadings.len() != n {
                    return bad(format!("{} loading rows for {n} obligors", loadings.len()));
                }
                let k = factor_correlation.len();
                if factor_correlation.iter().any(|row| row.len() != k) {
                    return bad("factor correlation matrix is not square".into());
                }
                if let Some(i) = loadings.iter().position(|b| b.len() != k) {
                    return bad(format!("obligor {}: expected {k} loadings", i + 1));
                }
                if loadings.iter().flatten().any(|b| !b.is_finite()) {
                    return bad("loadings must be finite".into());
                }
                self.factor_model()?;
            }
        }
        Ok(())
    }

    fn factor_model(&self) -> Result<FactorModel> {
        let n = self.obligors.len();
        let (loadings, corr) = match &self.dependence {
            Dependence::OneFactor { rho } => (
                rho.iter().map(|r| vec![r.sqrt()]).collect::<Vec<_>>(),
                DMatrix::from_element(1, 1, 1.0),
            ),
            Dependence::MultiFactor {
                loadings,
                factor_correlation,
            } => {
                let k = factor_correlation.len();
                let m = DMatrix::from_fn(k, k, |i, j| factor_correlation[i][j]);
                (loadings.clone(), m)
            }
        };
        let k = corr.nrows();
        for i in 0..k {
            if (corr[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidPortfolio(format!(
                    "factor correlation diagonal entry {} is {}, not 1",
                    i + 1,
                    corr[(i, i)]
                )));
            }
            for j in 0..i {
                if (corr[(i, j)] - corr[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidPortfolio(
                        "factor correlation matrix is not symmetric".into(),
                    ));
                }
            }
        }
        let eig = SymmetricEigen::new(corr.clone());
        if let Some(l) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOLERANCE) {
            return Err(Error::InvalidPortfolio(format!(
                "factor correlation matrix is not positive semidefinite (eigenvalue {l})"
            )));
        }
        let root_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        let root = &eig.eigenvectors * root_diag * eig.eigenvectors.transpose();

        let mut exposures = Vec::with_capacity(n);
        let mut sigma = Vec::with_capacity(n);
        for (i, b) in loadings.iter().enumerate() {
            let beta = DVector::from_column_slice(b);
            let systematic = beta.dot(&(&corr * &beta));
            if systematic > 1.0 + 1e-12 {
                return Err(Error::InvalidPortfolio(format!(
                    "obligor {}: systematic variance {systematic} exceeds 1",
                    i + 1
                )));
            }
            sigma.push((1.0 - systematic).max(0.0).sqrt());
            exposures.push((&root * &beta).iter().copied().collect());
        }
        Ok(FactorModel {
            exposures,
            sigma,
            thresholds: self.obligors.iter().map(|o| default_threshold(o.pd)).collect(),
            losses: self.obligors.iter().map(Obligor::loss_given_default).collect(),
        })
    }

    /// Reads a portfolio table with columns `ead, lgd, pd` followed by either
    /// `rho` (one-factor) or `beta_1..beta_K` (multi-factor).
    ///
    /// `correlation` is a square `K x K` table, with or without a header row;
    /// when absent the factors are independent.
    pub fn read_csv<R: Read, C: Read>(source: R, correlation: Option<C>) -> Result<Self> {
        let table = read_table(source)?;
        if table.header.is_empty() {
            return Err(Error::Malformed("portfolio table needs a header row".into()));
        }
        let ie = table.column_index(Some("ead"))?;
        let il = table.column_index(Some("lgd"))?;
        let ip = table.column_index(Some("pd"))?;
        let irho = table.header.iter().position(|h| h == "rho");
        let mut betas: Vec<(usize, usize)> = table
            .header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| {
                h.strip_prefix("beta_")
                    .and_then(|k| k.parse::<usize>().ok())
                    .map(|k| (k, i))
            })
            .collect();
        betas.sort_unstable();
        if betas.iter().enumerate().any(|(j, &(k, _))| k != j + 1) {
            return Err(Error::Malformed(
                "loading columns must be beta_1..beta_K without gaps".into(),
            ));
        }

        let mut obligors = Vec::with_capacity(table.rows.len());
        let mut rho = Vec::new();
        let mut loadings = Vec::new();
        for (line, cells) in &table.rows {
            obligors.push(Obligor {
                ead: table.numeric(*line, cells, ie)?,
                lgd: table.numeric(*line, cells, il)?,
                pd: table.numeric(*line, cells, ip)?,
            });
            if let Some(ir) = irho {
                rho.push(table.numeric(*line, cells, ir)?);
            } else {
                let row: Result<Vec<f64>> = betas
                    .iter()
                    .map(|&(_, i)| table.numeric(*line, cells, i))
                    .collect();
                loadings.push(row?);
            }
        }
        match (irho, betas.is_empty()) {
            (Some(_), true) => Self::one_factor(obligors, rho),
            (None, false) => {
                let k = betas.len();
                let corr = match correlation {
                    Some(src) => read_square_matrix(src)?,
                    None => (0..k)
                        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                        .collect(),
                };
                if corr.len() != k {
                    return Err(Error::Dimension(format!(
                        "{k} loading columns but a {0}x{0} correlation matrix",
                        corr.len()
                    )));
                }
                Self::multi_factor(obligors, loadings, corr)
            }
            _ => Err(Error::Malformed(
                "portfolio needs either a rho column or beta_1..beta_K columns".into(),
            )),
        }
    }
}

fn read_square_matrix<R: Read>(mut source: R) -> Result<Vec<Vec<f64>>> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Malformed(e.to_string()))?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(Error::Malformed(format!(
                    "correlation matrix line {} is not numeric",
                    i + 1
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    if rows.iter().any(|r| r.len() != rows.len()) {
        return Err(Error::Dimension("correlation matrix is not square".into()));
    }
    Ok(rows)
}

/// One default configuration of the exact loss law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    /// Bit `n` is set when obligor `n` defaults.
    pub mask: u64,
    pub loss: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum LossScenarioSet {
    /// Simulated scenario losses, in scenario order.
    MonteCarlo { seed: u64, losses: Vec<f64> },
    /// All configurations, sorted by loss and then mask.
    Exact {
        quad_order: usize,
        configurations: Vec<Configuration>,
    },
}

impl LossScenarioSet {
    pub fn len(&self) -> usize {
        match self {
            Self::MonteCarlo { losses, .. } => losses.len(),
            Self::Exact { configurations, .. } => configurations.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_probability(&self) -> f64 {
        match self {
            Self::MonteCarlo { losses, .. } => {
                if losses.is_empty() {
                    0.0
                } else {
                    1.0
                }
            }
            Self::Exact { configurations, .. } => {
                let mut s = Neumaier::default();
                configurations.iter().for_each(|c| s.add(c.prob));
                s.total()
            }
        }
    }

    /// `min{loss : P(Loss <= loss) >= alpha}`.
    ///
    /// Monte Carlo scenarios each carry probability `1/n`, so this is the
    /// `ceil(alpha n)`-th smallest simulated loss.
    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::LevelOutOfRange(alpha));
        }
        match self {
            Self::MonteCarlo { losses, .. } => {
                if losses.is_empty() {
                    return Err(Error::EmptyInput);
                }
                let n = losses.len();
                let k = ((alpha * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
                let mut sorted = losses.clone();
                let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
                Ok(*kth)
            }
            Self::Exact { configurations, .. } => {
                let idx = quantile_index(configurations, alpha).ok_or(Error::EmptyInput)?;
                Ok(configurations[idx].loss)
            }
        }
    }

    /// Monte Carlo: `scenario,loss`. Exact: `mask,loss,prob`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        match self {
            Self::MonteCarlo { losses, .. } => {
                w.write_record(["scenario", "loss"]).map_err(csv_err)?;
                for (i, l) in losses.iter().enumerate() {
                    w.write_record([i.to_string(), l.to_string()]).map_err(csv_err)?;
                }
            }
            Self::Exact { configurations, .. } => {
                w.write_record(["mask", "loss", "prob"]).map_err(csv_err)?;
                for c in configurations {
                    w.write_record([c.mask.to_string(), c.loss.to_string(), c.prob.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Index of the first configuration whose cumulative probability reaches
/// `alpha`, falling back to the last one.
fn quantile_index(configurations: &[Configuration], alpha: f64) -> Option<usize> {
    if configurations.is_empty() {
        return None;
    }
    let mut cum = Neumaier::default();
    for (i, c) in configurations.iter().enumerate() {
        cum.add(c.prob);
        if cum.total() >= alpha - LEVEL_SLACK {
            return Some(i);
        }
    }
    Some(configurations.len() - 1)
}

/// Simulates `n_scenarios` portfolio losses.
///
/// Scenario `i` draws from its own ChaCha8 stream `(seed, i)`, so the output
/// does not depend on the thread count. One-factor portfolios are simulated
/// as a single factor with loadings `sqrt(rho_n)`.
pub fn simulate_drc(
    portfolio: &CreditPortfolio,
    n_scenarios: usize,
    seed: u64,
) -> Result<LossScenarioSet> {
    if n_scenarios == 0 {
        return Err(Error::InvalidConfig("n_scenarios must be at least 1".into()));
    }
    portfolio.validate()?;
    let model = portfolio.factor_model()?;
    let k = model.exposures.first().map_or(0, Vec::len);
    let base = ChaCha8Rng::seed_from_u64(seed);
    let losses = (0..n_scenarios)
        .into_par_iter()
        .map_init(
            || vec![0.0; k],
            |z, i| {
                let mut rng = base.clone();
                rng.set_stream(i as u64);
                for zk in z.iter_mut() {
                    *zk = rng.sample(StandardNormal);
                }
                let mut loss = 0.0;
                for n in 0..model.losses.len() {
                    let eps: f64 = rng.sample(StandardNormal);
                    let systematic: f64 = model.exposures[n].iter().zip(z.iter()).map(|(c, w)| c * w).sum();
                    if systematic + model.sigma[n] * eps <= model.thresholds[n] {
                        loss += model.losses[n];
                    }
                }
                loss
            },
        )
        .collect();
    Ok(LossScenarioSet::MonteCarlo { seed, losses })
}

/// Gauss–Hermite rule for the standard normal weight: `E[f(U)] ~ sum w_i f(u_i)`.
///
/// Nodes come from Newton iteration on the orthonormal Hermite recurrence;
/// they are returned in ascending order.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    const PI_M4: f64 = 0.751_125_544_464_942_5;
    let n = order;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (PI_M4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let scale = std::f64::consts::PI.sqrt();
    let nodes: Vec<f64> = x.iter().rev().map(|t| std::f64::consts::SQRT_2 * t).collect();
    let weights: Vec<f64> = w.iter().rev().map(|v| v / scale).collect();
    (nodes, weights)
}

/// Per-node products of conditional default / survival probabilities over a
/// block of obligors, for every sub-configuration of the block.
///
/// Entry `[mask * q + node]` holds the product for `mask` at `node`.
fn block_table(cond: &[Vec<(f64, f64)>], q: usize) -> Vec<f64> {
    let size = 1usize << cond.len();
    let mut table = vec![1.0; size * q];
    for mask in 0..size {
        for node in 0..q {
            let mut p = 1.0;
            for (n, c) in cond.iter().enumerate() {
                let (d, s) = c[node];
                p *= if mask >> n & 1 == 1 { d } else { s };
            }
            table[mask * q + node] = p;
        }
    }
    table
}

fn block_losses(losses: &[f64]) -> Vec<f64> {
    (0..1usize << losses.len())
        .map(|mask| {
            losses
                .iter()
                .enumerate()
                .filter(|(n, _)| mask >> n & 1 == 1)
                .fold(0.0, |acc, (_, l)| acc + l)
        })
        .collect()
}

/// Enumerates the loss law of a one-factor portfolio.
///
/// `P_r = E_U[prod_{n in r} p_n(U) prod_{n not in r} (1 - p_n(U))]` with
/// `p_n(u) = Phi((b_n - sqrt(rho_n) u) / sqrt(1 - rho_n))`, `b_n = Phi^-1(PD_n)`.
pub fn exact_loss_distribution(
    portfolio: &CreditPortfolio,
    quad_order: usize,
) -> Result<LossScenarioSet> {
    portfolio.validate()?;
    let Dependence::OneFactor { rho } = &portfolio.dependence else {
        return Err(Error::InvalidPortfolio(
            "exact enumeration needs a one-factor portfolio".into(),
        ));
    };
    let n = portfolio.len();
    if n > MAX_EXACT_OBLIGORS {
        return Err(Error::EnumerationGuard {
            obligors: n,
            limit: MAX_EXACT_OBLIGORS,
        });
    }
    if quad_order < MIN_QUAD_ORDER {
        return Err(Error::QuadratureOrder(quad_order));
    }

    let (nodes, weights) = gauss_hermite(quad_order);
    let q = nodes.len();
    let phi = std_normal();
    let cond: Vec<Vec<(f64, f64)>> = portfolio
        .obligors
        .iter()
        .zip(rho)
        .map(|(o, &r)| {
            let b = default_threshold(o.pd);
            let (a, s) = (r.sqrt(), (1.0 - r).sqrt());
            nodes
                .iter()
                .map(|&u| {
                    let z = (b - a * u) / s;
                    if z == f64::NEG_INFINITY {
                        (0.0, 1.0)
                    } else if z == f64::INFINITY {
                        (1.0, 0.0)
                    } else {
                        (phi.cdf(z), phi.cdf(-z))
                    }
                })
                .collect()
        })
        .collect();

    let h = n / 2;
    let mut low = block_table(&cond[..h], q);
    for mask in 0..1usize << h {
        for (node, w) in weights.iter().enumerate() {
            low[mask * q + node] *= w;
        }
    }
    let high = block_table(&cond[h..], q);
    let losses: Vec<f64> = portfolio.obligors.iter().map(Obligor::loss_given_default).collect();
    let low_loss = block_losses(&losses[..h]);
    let high_loss = block_losses(&losses[h..]);

    let mut configurations: Vec<Configuration> = (0..1usize << (n - h))
        .into_par_iter()
        .flat_map_iter(|hi| {
            let hrow = &high[hi * q..(hi + 1) * q];
            let hloss = high_loss[hi];
            let (low, low_loss) = (&low, &low_loss);
            (0..1usize << h).map(move |lo| {
                let lrow = &low[lo * q..(lo + 1) * q];
                Configuration {
                    mask: ((hi << h) | lo) as u64,
                    loss: low_loss[lo] + hloss,
                    prob: lrow.iter().zip(hrow).map(|(a, b)| a * b).sum(),
                }
            })
        })
        .collect();
    configurations.par_sort_unstable_by(|a, b| a.loss.total_cmp(&b.loss).then(a.mask.cmp(&b.mask)));
    Ok(LossScenarioSet::Exact {
        quad_order,
        configurations,
    })
}

/// Default Risk Charge at level `alpha`: the first loss, in ascending order,
/// whose cumulative probability reaches `alpha`.
pub fn exact_drc(scenarios: &LossScenarioSet, alpha: f64) -> Result<f64> {
    scenarios.quantile(alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailWindowRow {
    /// 1-based position in the ascending-loss ordering.
    pub rank: usize,
    pub mask: u64,
    pub cum_prob: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailWindowReport {
    pub alpha: f64,
    /// Rank of the quantile configuration.
    pub k_index: usize,
    pub half_width: usize,
    pub rows: Vec<TailWindowRow>,
    /// `(max - min) / median` of the window losses; `None` when the median is 0.
    pub loss_spread_ratio: Option<f64>,
}

/// Ranks `k - W ..= k + W` (clipped) around the `alpha`-quantile rank `k`.
pub fn tail_window(
    scenarios: &LossScenarioSet,
    alpha: f64,
    half_width: usize,
) -> Result<TailWindowReport> {
    let LossScenarioSet::Exact { configurations, .. } = scenarios else {
        return Err(Error::InvalidConfig(
            "tail windows need an exact scenario set".into(),
        ));
    };
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::LevelOutOfRange(alpha));
    }
    let k = quantile_index(configurations, alpha).ok_or(Error::EmptyInput)?;
    let lo = k.saturating_sub(half_width);
    let hi = (k + half_width).min(configurations.len() - 1);

    let mut cum = Neumaier::default();
    configurations[..lo].iter().for_each(|c| cum.add(c.prob));
    let rows: Vec<TailWindowRow> = configurations[lo..=hi]
        .iter()
        .enumerate()
        .map(|(j, c)| {
            cum.add(c.prob);
            TailWindowRow {
                rank: lo + j + 1,
                mask: c.mask,
                cum_prob: cum.total(),
                loss: c.loss,
            }
        })
        .collect();

    let mut losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    losses.sort_by(f64::total_cmp);
    let m = losses.len();
    let median = if m % 2 == 1 {
        losses[m / 2]
    } else {
        0.5 * (losses[m / 2 - 1] + losses[m / 2])
    };
    let spread = losses[m - 1] - losses[0];
    Ok(TailWindowReport {
        alpha,
        k_index: k + 1,
        half_width,
        rows,
        loss_spread_ratio: (median > 0.0).then(|| spread / median),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileComparison {
    pub alpha: f64,
    pub n_scenarios: usize,
    pub quad_order: usize,
    pub seed: u64,
    pub mc_quantile: f64,
    pub exact_drc: f64,
    /// Exact quantiles at `alpha -/+ z sqrt(alpha (1 - alpha) / n)`.
    pub band: [f64; 2],
    pub band_z: f64,
    pub within_band: bool,
}

/// Width of the order-statistic band in binomial standard deviations.
pub const BAND_Z: f64 = 3.0;

/// Runs both engines on a one-factor portfolio and checks whether the
/// Monte Carlo quantile lies inside the binomial order-statistic band
/// around the exact DRC.
pub fn mc_quantile_vs_exact(
    portfolio: &CreditPortfolio,
    alpha: f64,
    n_scenarios: usize,
    quad_order: usize,
    seed: u64,
) -> Result<QuantileComparison> {
    let exact = exact_loss_distribution(portfolio, quad_order)?;
    let mc = simulate_drc(portfolio, n_scenarios, seed)?;
    let mc_quantile = mc.quantile(alpha)?;
    let exact_drc = exact.quantile(alpha)?;
    let delta = BAND_Z * (alpha * (1.0 - alpha) / n_scenarios as f64).sqrt();
    let lower_level = (alpha - delta).max(f64::MIN_POSITIVE);
    let band = [exact.quantile(lower_level)?, exact.quantile((alpha + delta).min(1.0))?];
    Ok(QuantileComparison {
        alpha,
        n_scenarios,
        quad_order,
        seed,
        mc_quantile,
        exact_drc,
        band,
        band_z: BAND_Z,
        within_band: band[0] <= mc_quantile && mc_quantile <= band[1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> CreditPortfolio {
        CreditPortfolio::one_factor(
            vec![
                Obligor { ead: 100.0, lgd: 1.0, pd: 0.1 },
                Obligor { ead: 100.0, lgd: 0.5, pd: 0.2 },
            ],
            vec![0.0, 0.0],
        )
        .unwrap()
    }

    fn random_portfolio(n: usize, rho: Option<f64>, seed: u64) -> CreditPortfolio {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obligors = (0..n)
            .map(|_| Obligor {
                ead: rng.random_range(10.0..1000.0),
                lgd: rng.random_range(0.2..1.0),
                pd: rng.random_range(0.001..0.05),
            })
            .collect();
        let rho = (0..n)
            .map(|_| rho.unwrap_or_else(|| rng.random_range(0.0..0.6)))
            .collect();
        CreditPortfolio::one_factor(obligors, rho).unwrap()
    }

    fn configurations(set: &LossScenarioSet) -> &[Configuration] {
        match set {
            LossScenarioSet::Exact { configurations, .. } => configurations,
            _ => panic!("expected exact set"),
        }
    }

    fn losses(set: &LossScenarioSet) -> &[f64] {
        match set {
            LossScenarioSet::MonteCarlo { losses, .. } => losses,
            _ => panic!("expected Monte Carlo set"),
        }
    }

    #[test]
    fn hermite_rule_moments() {
        for order in [8, 20, 64, 128] {
            let (u, w) = gauss_hermite(order);
            assert!(u.windows(2).all(|p| p[0] < p[1]));
            let m = |k: i32| -> f64 { u.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum() };
            assert!((m(0) - 1.0).abs() < 1e-13, "order {order}: {}", m(0));
            assert!(m(1).abs() < 1e-13);
            assert!((m(2) - 1.0).abs() < 1e-12);
            assert!((m(4) - 3.0).abs() < 1e-11);
            assert!((m(6) - 15.0).abs() < 1e-10);
        }
    }

    #[test]
    fn independent_toy_law() {
        let set = exact_loss_distribution(&toy(), DEFAULT_QUAD_ORDER).unwrap();
        let expect = [(0, 0.0, 0.72), (2, 50.0, 0.18), (1, 100.0, 0.08), (3, 150.0, 0.02)];
        let got = configurations(&set);
        assert_eq!(got.len(), 4);
        for (c, (mask, loss, prob)) in got.iter().zip(expect) {
            assert_eq!(c.mask, mask);
            assert_eq!(c.loss, loss);
            assert!((c.prob - prob).abs() < 1e-10, "{c:?}");
        }
    }

    #[test]
    fn toy_drc() {
        let set = exact_loss_distribution(&toy(), DEFAULT_QUAD_ORDER).unwrap();
        assert_eq!(exact_drc(&set, 0.999).unwrap(), 150.0);
        assert_eq!(exact_drc(&set, 0.5).unwrap(), 0.0);
        assert_eq!(exact_drc(&set, 0.9).unwrap(), 50.0);
        assert_eq!(exact_drc(&set, 0.95).unwrap(), 100.0);
        assert!(exact_drc(&set, 0.0).is_err());
    }

    #[test]
    fn single_configuration_is_every_quantile() {
        let set = LossScenarioSet::Exact {
            quad_order: 64,
            configurations: vec![Configuration { mask: 5, loss: 42.0, prob: 1.0 }],
        };
        for a in [1e-6, 0.5, 0.999, 1.0] {
            assert_eq!(exact_drc(&set, a).unwrap(), 42.0);
        }
    }

    #[test]
    fn copula_preserves_marginal() {
        let p = CreditPortfolio::one_factor(vec![Obligor { ead: 1.0, lgd: 1.0, pd: 0.1 }], vec![0.5]).unwrap();
        let set = exact_loss_distribution(&p, DEFAULT_QUAD_ORDER).unwrap();
        let c = configurations(&set);
        assert_eq!(c[1].mask, 1);
        assert!((c[1].prob - 0.1).abs() < 1e-10, "{}", c[1].prob);
    }

    #[test]
    fn total_probability_is_one() {
        for (i, n) in [1, 3, 7, 10, 12].into_iter().enumerate() {
            let set = exact_loss_distribution(&random_portfolio(n, None, i as u64), 64).unwrap();
            assert_eq!(set.len(), 1 << n);
            assert!((set.total_probability() - 1.0).abs() < 1e-8);
            assert!(configurations(&set).iter().all(|c| c.prob >= 0.0));
            assert!(configurations(&set).windows(2).all(|w| w[0].loss <= w[1].loss));
        }
    }

    #[test]
    fn quadrature_converges() {
        let mut p = random_portfolio(8, None, 11);
        p.obligors[0].pd = 3e-7;
        p.obligors[1].pd = 0.4;
        let a = exact_loss_distribution(&p, 64).unwrap();
        let b = exact_loss_distribution(&p, 128).unwrap();
        let worst = configurations(&a)
            .iter()
            .zip(configurations(&b))
            .map(|(x, y)| {
                assert_eq!(x.mask, y.mask);
                (x.prob - y.prob).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "max change {worst:e}");
    }

    #[test]
    fn drc_is_monotone_in_pd() {
        for seed in 0..4 {
            let base = random_portfolio(10, Some(0.3), 100 + seed);
            let mut bumped = base.clone();
            bumped.obligors.iter_mut().for_each(|o| o.pd = (o.pd * 1.5).min(1.0));
            for alpha in [0.99, 0.999] {
                let a = exact_drc(&exact_loss_distribution(&base, 64).unwrap(), alpha).unwrap();
                let b = exact_drc(&exact_loss_distribution(&bumped, 64).unwrap(), alpha).unwrap();
                assert!(b >= a, "seed {seed}, alpha {alpha}: {a} -> {b}");
            }
        }
    }

    #[test]
    fn tail_window_on_toy() {
        let set = exact_loss_distribution(&toy(), 64).unwrap();
        let w = tail_window(&set, 0.999, 1).unwrap();
        assert_eq!(w.k_index, 4);
        assert_eq!(w.rows.iter().map(|r| r.rank).collect::<Vec<_>>(), [3, 4]);
        assert_eq!(w.rows.iter().map(|r| r.loss).collect::<Vec<_>>(), [100.0, 150.0]);
        assert!((w.rows[0].cum_prob - 0.98).abs() < 1e-10);
        assert!((w.rows[1].cum_prob - 1.0).abs() < 1e-10);
        assert!((w.loss_spread_ratio.unwrap() - 50.0 / 125.0).abs() < 1e-12);

        let w0 = tail_window(&set, 0.999, 0).unwrap();
        assert_eq!(w0.rows.len(), 1);
        assert_eq!(w0.rows[0].rank, 4);
        assert_eq!(w0.loss_spread_ratio, Some(0.0));
    }

    #[test]
    fn homogeneous_window_has_no_spread() {
        let obligors = vec![Obligor { ead: 10.0, lgd: 0.6, pd: 0.02 }; 12];
        let p = CreditPortfolio::one_factor(obligors, vec![0.25; 12]).unwrap();
        let set = exact_loss_distribution(&p, 64).unwrap();
        let w = tail_window(&set, 0.999, 20).unwrap();
        assert_eq!(w.rows.len(), 41);
        assert_eq!(w.loss_spread_ratio, Some(0.0));
        assert!(w.rows.windows(2).all(|r| r[0].cum_prob <= r[1].cum_prob));
    }

    #[test]
    fn exact_guards() {
        let p = random_portfolio(MAX_EXACT_OBLIGORS + 1, Some(0.1), 3);
        assert_eq!(
            exact_loss_distribution(&p, 64),
            Err(Error::EnumerationGuard { obligors: 27, limit: 26 })
        );
        assert_eq!(exact_loss_distribution(&toy(), 7), Err(Error::QuadratureOrder(7)));
        let mf = CreditPortfolio::multi_factor(
            vec![Obligor { ead: 1.0, lgd: 1.0, pd: 0.1 }],
            vec![vec![0.3]],
            vec![vec![1.0]],
        )
        .unwrap();
        assert!(matches!(exact_loss_distribution(&mf, 64), Err(Error::InvalidPortfolio(_))));
    }

    #[test]
    fn zero_pd_never_defaults() {
        let mut p = random_portfolio(5, Some(0.4), 9);
        p.obligors.iter_mut().for_each(|o| o.pd = 0.0);
        let set = simulate_drc(&p, 10_000, 1).unwrap();
        assert!(losses(&set).iter().all(|&l| l == 0.0));
    }

    #[test]
    fn single_obligor_frequency() {
        let p = CreditPortfolio::multi_factor(
            vec![Obligor { ead: 1.0, lgd: 1.0, pd: 0.5 }],
            vec![vec![0.6, -0.3]],
            vec![vec![1.0, 0.4], vec![0.4, 1.0]],
        )
        .unwrap();
        let n = 100_000;
        let set = simulate_drc(&p, n, 17).unwrap();
        let freq = losses(&set).iter().filter(|&&l| l > 0.0).count() as f64 / n as f64;
        let sd = (0.25 / n as f64).sqrt();
        assert!((freq - 0.5).abs() < 3.0 * sd, "freq {freq}");
    }

    #[test]
    fn independent_toy_simulation() {
        let p = CreditPortfolio::multi_factor(
            toy().obligors,
            vec![vec![0.0], vec![0.0]],
            vec![vec![1.0]],
        )
        .unwrap();
        let n = 1_000_000;
        let set = simulate_drc(&p, n, 5).unwrap();
        let hits = losses(&set).iter().filter(|&&l| l == 150.0).count() as f64 / n as f64;
        let sd = (0.02 * 0.98 / n as f64).sqrt();
        assert!((hits - 0.02).abs() < 3.0 * sd, "P(150) = {hits}");
        assert_eq!(set.quantile(0.999).unwrap(), 150.0);
    }

    #[test]
    fn marginals_are_calibrated_under_correlated_factors() {
        let corr = vec![
            vec![1.0, 0.5, -0.2],
            vec![0.5, 1.0, 0.3],
            vec![-0.2, 0.3, 1.0],
        ];
        let pds = [0.05, 0.2, 0.01];
        let obligors: Vec<Obligor> = pds.iter().map(|&pd| Obligor { ead: 1.0, lgd: 1.0, pd }).collect();
        let loadings = vec![vec![0.5, 0.4, 0.0], vec![0.0, -0.3, 0.6], vec![0.7, 0.0, 0.2]];
        let p = CreditPortfolio::multi_factor(obligors, loadings, corr).unwrap();
        let model = p.factor_model().unwrap();
        let n = 200_000;
        let mut defaults = [0usize; 3];
        let base = ChaCha8Rng::seed_from_u64(3);
        for i in 0..n {
            let mut rng = base.clone();
            rng.set_stream(i as u64);
            let z: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            for (j, d) in defaults.iter_mut().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                let x: f64 = model.exposures[j].iter().zip(&z).map(|(c, w)| c * w).sum::<f64>() + model.sigma[j] * e;
                *d += usize::from(x <= model.thresholds[j]);
            }
        }
        for (d, pd) in defaults.iter().zip(pds) {
            let f = *d as f64 / n as f64;
            assert!((f - pd).abs() < 3.0 * (pd * (1.0 - pd) / n as f64).sqrt(), "{f} vs {pd}");
        }
    }

    #[test]
    fn simulation_is_independent_of_thread_count() {
        let p = random_portfolio(6, Some(0.3), 2);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_drc(&p, 20_000, 99).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn invalid_factor_models() {
        let o = vec![Obligor { ead: 1.0, lgd: 1.0, pd: 0.1 }];
        let err = |l: Vec<Vec<f64>>, c: Vec<Vec<f64>>| CreditPortfolio::multi_factor(o.clone(), l, c).unwrap_err();
        assert!(matches!(err(vec![vec![0.8, 0.8]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]), Error::InvalidPortfolio(m) if m.contains("exceeds 1")));
        assert!(matches!(
            err(vec![vec![0.1, 0.1, 0.1]], vec![vec![1.0, 0.9, -0.9], vec![0.9, 1.0, 0.9], vec![-0.9, 0.9, 1.0]]),
            Error::InvalidPortfolio(m) if m.contains("semidefinite")
        ));
        assert!(matches!(err(vec![vec![0.1]], vec![vec![2.0]]), Error::InvalidPortfolio(m) if m.contains("diagonal")));
        assert!(matches!(
            err(vec![vec![0.1, 0.1]], vec![vec![1.0, 0.2], vec![0.3, 1.0]]),
            Error::InvalidPortfolio(m) if m.contains("symmetric")
        ));
        assert!(CreditPortfolio::one_factor(o.clone(), vec![1.0]).is_err());
        assert!(simulate_drc(&toy(), 0, 1).is_err());
    }

    #[test]
    fn monte_carlo_agrees_with_enumeration() {
        let p = random_portfolio(10, Some(0.3), 21);
        let a = mc_quantile_vs_exact(&p, 0.999, 200_000, 64, 1).unwrap();
        let b = mc_quantile_vs_exact(&p, 0.999, 200_000, 64, 2).unwrap();
        assert!(a.within_band, "{a:?}");
        assert!(b.within_band, "{b:?}");
        assert_eq!(a.exact_drc, b.exact_drc);
        assert!(a.band[0] <= a.exact_drc && a.exact_drc <= a.band[1]);
        let sa = simulate_drc(&p, 1000, 1).unwrap();
        let sb = simulate_drc(&p, 1000, 2).unwrap();
        assert_ne!(sa, sb);
    }

    #[test]
    fn mc_quantile_convention() {
        let set = LossScenarioSet::MonteCarlo {
            seed: 0,
            losses: vec![5.0, 1.0, 4.0, 2.0, 3.0],
        };
        assert_eq!(set.quantile(0.2).unwrap(), 1.0);
        assert_eq!(set.quantile(0.21).unwrap(), 2.0);
        assert_eq!(set.quantile(0.8).unwrap(), 4.0);
        assert_eq!(set.quantile(1.0).unwrap(), 5.0);
    }

    #[test]
    fn portfolio_csv() {
        let one = "ead,lgd,pd,rho\n100,1,0.1,0\n100,0.5,0.2,0\n";
        let p = CreditPortfolio::read_csv(one.as_bytes(), None::<&[u8]>).unwrap();
        assert_eq!(p, toy());

        let multi = "ead,lgd,pd,beta_2,beta_1\n10,0.5,0.01,0.2,0.3\n";
        let corr = "f1,f2\n1,0.25\n0.25,1\n";
        let p = CreditPortfolio::read_csv(multi.as_bytes(), Some(corr.as_bytes())).unwrap();
        match &p.dependence {
            Dependence::MultiFactor { loadings, factor_correlation } => {
                assert_eq!(loadings, &vec![vec![0.3, 0.2]]);
                assert_eq!(factor_correlation[0][1], 0.25);
            }
            _ => panic!(),
        }
        let p = CreditPortfolio::read_csv(multi.as_bytes(), None::<&[u8]>).unwrap();
        assert!(matches!(p.dependence, Dependence::MultiFactor { .. }));

        let bad = "ead,lgd,pd,rho\n100,1,x,0\n";
        assert_eq!(
            CreditPortfolio::read_csv(bad.as_bytes(), None::<&[u8]>),
            Err(Error::NonNumeric { row: 2, column: "pd".into(), value: "x".into() })
        );
        let neither = "ead,lgd,pd\n1,1,0.1\n";
        assert!(CreditPortfolio::read_csv(neither.as_bytes(), None::<&[u8]>).is_err());
        let wrong_k = "1,0\n0,1\n";
        let one_beta = "ead,lgd,pd,beta_1\n1,1,0.1,0.2\n";
        assert!(matches!(
            CreditPortfolio::read_csv(one_beta.as_bytes(), Some(wrong_k.as_bytes())),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn scenario_csv() {
        let set = exact_loss_distribution(&toy(), 64).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("mask,loss,prob\n0,0,0.72"));
        assert_eq!(text.lines().count(), 5);
    }
}
