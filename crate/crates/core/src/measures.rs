//! Classical scalar risk measures on an empirical loss distribution.
//!
//! VaR follows the order-statistic convention of historical simulation: with
//! `S` observations, `VaR_alpha` is the `k`-th worst loss where
//! `k = max(1, floor((1 - alpha) S))` (the 5th worst of 500 at 99%). No
//! interpolation is applied.

use serde::{Deserialize, Serialize};

use crate::distribution::{EmpiricalDistribution, Neumaier, MASS_TOLERANCE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskMeasureReport {
    pub var: f64,
    pub es: f64,
    pub worst_case: f64,
    pub alpha: f64,
    /// Level used for ES when it differs from `alpha`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub es_alpha: Option<f64>,
    pub horizon_days: u32,
    /// `var` scaled to the horizon by the square-root-of-time rule.
    pub var_horizon: f64,
    /// `es` scaled to the horizon by the square-root-of-time rule.
    pub es_horizon: f64,
    pub sample_size: u64,
}

fn check_level(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::LevelOutOfRange(alpha))
    }
}

/// Order-statistic rank `k` of the VaR at level `alpha` among `s` observations.
pub fn tail_rank(alpha: f64, s: u64) -> usize {
    // The nudge keeps e.g. (1 - 0.99) * 500 = 5.000000000000004 and
    // 4.999999999999999 on the same side of the floor.
    let k = ((1.0 - alpha) * s as f64 + 1e-9).floor() as usize;
    k.max(1)
}

/// `k`-th worst loss, `k = max(1, floor((1 - alpha) S))`.
pub fn value_at_risk(dist: &EmpiricalDistribution, alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    let s = dist.sample_size();
    let k = tail_rank(alpha, s);
    // For equally weighted samples each observation carries 1/S, so walking
    // down until the tail mass reaches k/S lands on the k-th worst.
    let target = k as f64 / s as f64;
    let mut tail = 0.0;
    for a in dist.atoms().iter().rev() {
        tail += a.weight;
        if tail >= target - MASS_TOLERANCE {
            return Ok(a.value);
        }
    }
    Ok(dist.min())
}

/// Mean loss over the closed tail `{X >= VaR_alpha}`; atoms tied at the VaR
/// enter with their full mass.
pub fn expected_shortfall(dist: &EmpiricalDistribution, alpha: f64) -> Result<f64> {
    let var = value_at_risk(dist, alpha)?;
    let lo = dist.atoms().partition_point(|a| a.value < var);
    let (mut mass, mut first) = (Neumaier::default(), Neumaier::default());
    for a in &dist.atoms()[lo..] {
        mass.add(a.weight);
        first.add(a.weight * a.value);
    }
    Ok(first.total() / mass.total())
}

/// Essential supremum of the sample: the largest loss.
pub fn worst_case(dist: &EmpiricalDistribution) -> f64 {
    dist.max()
}

/// Square-root-of-time rule `VaR(alpha, h) = VaR(alpha, 1) sqrt(h)`.
pub fn scale_horizon(one_day: f64, h: u32) -> Result<f64> {
    if h < 1 {
        return Err(Error::InvalidHorizon(h));
    }
    Ok(one_day * f64::from(h).sqrt())
}

/// VaR, ES and worst case in one report. `es_alpha` defaults to `alpha`.
pub fn risk_report(
    dist: &EmpiricalDistribution,
    alpha: f64,
    es_alpha: Option<f64>,
    horizon_days: u32,
) -> Result<RiskMeasureReport> {
    let var = value_at_risk(dist, alpha)?;
    let es = expected_shortfall(dist, es_alpha.unwrap_or(alpha))?;
    Ok(RiskMeasureReport {
        var,
        es,
        worst_case: worst_case(dist),
        alpha,
        es_alpha: es_alpha.filter(|&a| a != alpha),
        horizon_days,
        var_horizon: scale_horizon(var, horizon_days)?,
        es_horizon: scale_horizon(es, horizon_days)?,
        sample_size: dist.sample_size(),
    })
}
