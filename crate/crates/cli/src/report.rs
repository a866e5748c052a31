//! Report documents written by the subcommands. Each one embeds the
//! effective configuration that produced it.

use riskquant_core::credit::{QuantileComparison, TailWindowReport};
use riskquant_core::measures::RiskMeasureReport;
use riskquant_core::ot::StageSummary;
use riskquant_core::quantize2::Quantizer2;
use riskquant_core::quantize3::{CriticalityReport, Quantizer3};
use serde::{Deserialize, Serialize};

use crate::config::{DrcConfig, DrcMode, MeasureConfig, MethodChoice, QuantizeConfig, SeriesConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub config: MeasureConfig,
    pub measures: RiskMeasureReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtDiagnostics {
    pub entropic_optimum: [f64; 2],
    pub plan_masses: [f64; 3],
    pub w_epsilon: f64,
    pub stages: Vec<StageSummary>,
    pub monotonicity_violations: Vec<usize>,
}

/// One solver run: a result or the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    /// Column label, e.g. `de` or `de-constrained`.
    pub label: String,
    pub method: MethodChoice,
    pub constrained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantizer: Option<Quantizer3>,
    /// Directional-derivative check; unconstrained runs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criticality: Option<CriticalityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ot: Option<OtDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Quantities by row, solver runs by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub quantity: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub config: QuantizeConfig,
    pub measures: RiskMeasureReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var_floor: Option<f64>,
    pub runs: Vec<MethodRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_point: Option<Quantizer2>,
    pub table: ComparisonTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrcReport {
    pub config: DrcConfig,
    pub mode: DrcMode,
    pub alpha: f64,
    pub drc: f64,
    pub obligors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_scenarios: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad_order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Exact mode: sum of all configuration probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<QuantileComparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_window: Option<TailWindowReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub file: String,
    pub sample_size: u64,
    pub var: f64,
    pub es: f64,
    pub worst_case: f64,
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub p0: Option<f64>,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub config: SeriesConfig,
    pub rows: Vec<SeriesRow>,
}
