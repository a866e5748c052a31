//! Effective run configuration: command-line flags over the TOML file over
//! built-in defaults.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use riskquant_core::config::SolverConfig;
use riskquant_core::credit::DEFAULT_QUAD_ORDER;
use riskquant_core::distribution::SignConvention;
use riskquant_core::error::Error;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodChoice {
    FixedPoint,
    De,
    Ot,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Values are profit-and-loss; losses are negative.
    #[default]
    PnlSigned,
    /// Values are already losses, positive when money is lost.
    LossesPositive,
}

impl From<Convention> for SignConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::PnlSigned => SignConvention::PnlSigned,
            Convention::LossesPositive => SignConvention::LossesPositive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DrcMode {
    Sim,
    Exact,
    Compare,
    TailWindow,
}

/// Contents of a `--config` TOML file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub alpha: Option<f64>,
    pub es_alpha: Option<f64>,
    pub horizon: Option<u32>,
    pub column: Option<String>,
    pub convention: Option<Convention>,
    pub method: Option<MethodChoice>,
    pub constrained: Option<bool>,
    pub two_point: Option<bool>,
    pub directions: Option<usize>,
    pub format: Option<Format>,
    pub solver: Option<SolverConfig>,
    pub drc: DrcFileConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrcFileConfig {
    pub alpha: Option<f64>,
    pub n_scenarios: Option<usize>,
    pub quad_order: Option<usize>,
    pub seed: Option<u64>,
    pub half_width: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
    }
}

/// Solver overrides accepted on the command line.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct SolverFlags {
    /// Fixed-point tolerance relative to the sample mean.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub multistart: Option<usize>,
    /// Seed shared by DE and the criticality directions.
    #[arg(long)]
    pub seed: Option<u64>,
    /// DE population size.
    #[arg(long)]
    pub np: Option<usize>,
    #[arg(long)]
    pub generations: Option<usize>,
    /// Smallest entropic regularization, as a fraction of the variance.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

impl SolverFlags {
    pub fn resolve(&self, file: Option<&SolverConfig>) -> Result<SolverConfig, Failure> {
        let mut cfg = file.cloned().unwrap_or_default();
        if let Some(v) = self.tol {
            cfg.tol = v;
        }
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = self.multistart {
            cfg.multistart = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.np {
            cfg.de_population = Some(v);
        }
        if let Some(v) = self.generations {
            cfg.de_max_generations = v;
        }
        if let Some(v) = self.epsilon {
            cfg.ot_epsilon_min = v;
            cfg.ot_epsilon_start = cfg.ot_epsilon_start.max(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn check_alpha(alpha: f64) -> Result<f64, Failure> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(Error::LevelOutOfRange(alpha).into())
    }
}

pub fn check_file(path: &Path) -> Result<PathBuf, Failure> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Failure::input(format!("{}: no such file", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub input: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub convention: Convention,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub es_alpha: Option<f64>,
    pub horizon: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeConfig {
    pub input: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub convention: Convention,
    /// Level of the VaR floor and of the reference measures.
    pub alpha: f64,
    pub method: MethodChoice,
    pub constrained: bool,
    pub two_point: bool,
    /// Directions used by the criticality check.
    pub directions: usize,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrcConfig {
    pub mode: DrcMode,
    pub portfolio: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<PathBuf>,
    pub alpha: f64,
    pub n_scenarios: usize,
    pub quad_order: usize,
    pub seed: u64,
    pub half_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesConfig {
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub convention: Convention,
    pub alpha: f64,
    pub method: MethodChoice,
    pub constrained: bool,
    pub solver: SolverConfig,
}

pub const DEFAULT_ALPHA: f64 = 0.99;
pub const DEFAULT_DRC_ALPHA: f64 = 0.999;
pub const DEFAULT_DIRECTIONS: usize = 64;
pub const DEFAULT_SCENARIOS: usize = 100_000;
pub const DEFAULT_HALF_WIDTH: usize = 500;
pub const DEFAULT_DRC_QUAD_ORDER: usize = DEFAULT_QUAD_ORDER;
